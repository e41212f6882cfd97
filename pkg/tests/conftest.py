"""Shared helpers: directly provisioned enclaves and envelope builders."""

import struct
from random import Random

import numpy as np

from fedtee import crypto, enclave, model
from fedtee.crypto import SymKey
from fedtee.enclave import EnclaveProgram, PartitionConf, SgxHost, ra_key_exchange

TASKID = b"task-under-test"


def build_program(hook: str = "fedavg") -> EnclaveProgram:
    return EnclaveProgram(b"aggregation-contract-code", hook)


def provision_enclave(
    *,
    clients=(1, 2),
    layer_range=(0,),
    chunk_base=0,
    tx_capacity=1 << 20,
    epc_budget=enclave.DEFAULT_EPC_BUDGET,
    paging=False,
    round_index=0,
    hook="fedavg",
    seed=0,
):
    """Install and fully provision one enclave the way the committee would.

    Returns a dict with the host, eid, per-client session keys, the master
    key, the verification key pair, and the committee session key.
    """
    rng = Random(seed)
    host = SgxHost(enclave.make_eid_allocator())
    program = build_program(hook)
    eid = host.install(TASKID, program, epc_budget=epc_budget, paging_enabled=paging, rng_seed=seed)

    committee_ssk = ra_key_exchange("committee", host, eid, program.measurement, rng)
    vk = crypto.sig_keygen(rng.randbytes(32))
    env = crypto.ae_encrypt(
        committee_ssk,
        crypto.keydeliver_aad(TASKID, b"sk_vk"),
        vk.secret_scalar_bytes(),
        rng=rng,
    )
    host.getsk(eid, "committee", env)

    part = PartitionConf(
        layer_range=tuple(layer_range),
        client_subset=tuple(clients),
        chunk_base=chunk_base,
        tx_capacity=tx_capacity,
    )
    env = crypto.ae_encrypt(
        committee_ssk,
        crypto.keydeliver_aad(TASKID, b"partition"),
        part.to_json_bytes(),
        rng=rng,
    )
    host.load_partition(eid, "committee", env)

    arm_round(host, eid, committee_ssk, round_index, rng)

    ssk_by_client = {
        c: ra_key_exchange(f"client:{c}", host, eid, program.measurement, rng) for c in clients
    }
    msk = SymKey(rng.randbytes(16))
    return {
        "host": host,
        "eid": eid,
        "program": program,
        "vk": vk,
        "committee_ssk": committee_ssk,
        "ssk_by_client": ssk_by_client,
        "msk": msk,
        "rng": rng,
    }


def arm_round(host, eid, committee_ssk, round_index, rng):
    plain = struct.pack(">H", len(TASKID)) + TASKID + struct.pack(">Q", round_index)
    env = crypto.ae_encrypt(
        committee_ssk, crypto.keydeliver_aad(TASKID, b"round"), plain, rng=rng
    )
    host.set_round(eid, "committee", env)


def client_inputs(ctx, updates, round_index=0):
    """Encrypt LocalUpdates the way clients do; returns resume() inputs."""
    out = []
    for u in sorted(updates, key=lambda u: u.client):
        ssk = ctx["ssk_by_client"][u.client]
        env_m = crypto.ae_encrypt(
            ssk, crypto.model_aad(TASKID, round_index, u.client), model.encode_model(u),
            rng=ctx["rng"],
        )
        env_k = crypto.ae_encrypt(
            ssk, crypto.msk_aad(TASKID, round_index, u.client), ctx["msk"].raw, rng=ctx["rng"]
        )
        out.append((env_m, env_k, u.client))
    return out


def simple_update(client, values_by_layer, dataset_size=1, round_index=0):
    layers = [
        model.Layer(i, np.array(vals, dtype=np.float64))
        for i, vals in enumerate(values_by_layer)
    ]
    return model.LocalUpdate(TASKID, client, round_index, model.WeightVector(layers), dataset_size)


def decrypt_output(ctx, output, round_index=0, chunk_base=0):
    """Reassemble chunks, decrypt under the master key, decode the partial."""
    blob = b"".join(c.payload for c in output.chunks)
    env = crypto.Envelope.from_bytes(blob)
    assert env.aad == crypto.output_aad(TASKID, round_index, chunk_base)
    return model.decode_partial(crypto.ae_decrypt(ctx["msk"], env))
