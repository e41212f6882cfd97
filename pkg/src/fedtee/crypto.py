"""Authenticated encryption, digital signatures, and session-key agreement.

Everything the protocol encrypts travels in an :class:`Envelope` (AES-GCM,
128-bit keys, 12-byte nonces). Enclave outputs are signed with ECDSA over
NIST P-256, and session keys come from an ephemeral ECDH agreement on the
same curve whose key derivation binds both party identifiers and the
enclave's program measurement.

All operations are pure or take caller-supplied randomness, so they are safe
to use concurrently from independent role instances.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from random import Random

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_BYTES = 16
NONCE_BYTES = 12
TAG_BYTES = 16
SEED_BYTES = 32

_CURVE = ec.SECP256R1()
_CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class AuthFailure(Exception):
    """Decryption failed: key, nonce, aad, ciphertext or tag was altered."""


class MeasurementMismatch(Exception):
    """Key agreement aborted: installed program hash differs from the expected one."""


@dataclass(eq=False)
class SymKey:
    """A 16-byte symmetric key (session keys and the task master key).

    The raw bytes must never appear on a transport frame or ledger entry;
    confidentiality checks scan for them.
    """

    raw: bytes

    def __post_init__(self) -> None:
        if len(self.raw) != KEY_BYTES:
            raise ValueError(f"symmetric key must be {KEY_BYTES} bytes, got {len(self.raw)}")
        # Nonces drawn under this key instance; reuse trips an assertion.
        self._seen_nonces: set[bytes] = set()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SymKey) and other.raw == self.raw

    def __repr__(self) -> str:
        return "SymKey(<16 bytes>)"


@dataclass(frozen=True)
class Envelope:
    """Authenticated ciphertext: nonce, associated data, ciphertext, 16-byte tag.

    Any single-bit change to any field makes :func:`ae_decrypt` raise
    :class:`AuthFailure`.
    """

    nonce: bytes
    aad: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        """Wire encoding: nonce(12) + aad_len(u16 BE) + aad + ct_len(u32 BE) + ct + tag(16)."""
        return b"".join(
            (
                self.nonce,
                struct.pack(">H", len(self.aad)),
                self.aad,
                struct.pack(">I", len(self.ciphertext)),
                self.ciphertext,
                self.tag,
            )
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        env, off = parse_envelope_at(data, 0)
        if off != len(data):
            raise ValueError("trailing bytes after envelope")
        return env

    def encoded_size(self) -> int:
        return NONCE_BYTES + 2 + len(self.aad) + 4 + len(self.ciphertext) + TAG_BYTES


def parse_envelope_at(data: bytes, off: int) -> tuple[Envelope, int]:
    """Parse one wire-encoded envelope starting at ``off``; returns (env, end)."""
    if len(data) < off + NONCE_BYTES + 2:
        raise ValueError("envelope too short")
    nonce = data[off : off + NONCE_BYTES]
    off += NONCE_BYTES
    (aad_len,) = struct.unpack_from(">H", data, off)
    off += 2
    aad = data[off : off + aad_len]
    off += aad_len
    if len(data) < off + 4:
        raise ValueError("envelope truncated before ciphertext length")
    (ct_len,) = struct.unpack_from(">I", data, off)
    off += 4
    ciphertext = data[off : off + ct_len]
    off += ct_len
    tag = data[off : off + TAG_BYTES]
    off += TAG_BYTES
    if len(aad) != aad_len or len(ciphertext) != ct_len or len(tag) != TAG_BYTES:
        raise ValueError("envelope truncated")
    return Envelope(nonce, aad, ciphertext, tag), off


def envelope_encoded_size(aad_len: int, plaintext_len: int) -> int:
    """Size of Envelope.to_bytes() without building one (GCM keeps ct == pt length)."""
    return NONCE_BYTES + 2 + aad_len + 4 + plaintext_len + TAG_BYTES


def ae_encrypt(key: SymKey, aad: bytes, plaintext: bytes, rng: Random | None = None) -> Envelope:
    """Encrypt under AES-GCM with a fresh 12-byte nonce drawn from ``rng``.

    Nonce uniqueness per key instance is asserted; a seeded ``rng`` keeps the
    run reproducible, ``None`` falls back to OS entropy.
    """
    nonce = rng.randbytes(NONCE_BYTES) if rng is not None else os.urandom(NONCE_BYTES)
    if nonce in key._seen_nonces:
        raise RuntimeError("nonce reuse under one key within a run")
    key._seen_nonces.add(nonce)
    sealed = AESGCM(key.raw).encrypt(nonce, plaintext, aad)
    return Envelope(nonce=nonce, aad=aad, ciphertext=sealed[:-TAG_BYTES], tag=sealed[-TAG_BYTES:])


def ae_decrypt(key: SymKey, env: Envelope) -> bytes:
    """Recover the plaintext; :class:`AuthFailure` if anything was altered."""
    try:
        return AESGCM(key.raw).decrypt(env.nonce, env.ciphertext + env.tag, env.aad)
    except InvalidTag as exc:
        raise AuthFailure("envelope failed authentication") from exc


# ---------------------------------------------------------------------------
# Signatures (ECDSA over P-256)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Signature:
    raw: bytes  # DER-encoded (r, s)


@dataclass(eq=False)
class SigKeyPair:
    public: ec.EllipticCurvePublicKey
    secret: ec.EllipticCurvePrivateKey = field(repr=False)

    def public_bytes(self) -> bytes:
        """Uncompressed X9.62 point, suitable for publication on the ledger."""
        return self.public.public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
        )

    def secret_scalar_bytes(self) -> bytes:
        """32-byte private scalar, only ever shipped inside an Envelope."""
        return self.secret.private_numbers().private_value.to_bytes(32, "big")


def load_public_key(point: bytes) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, point)


def load_secret_key(scalar: bytes) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(int.from_bytes(scalar, "big"), _CURVE)


def sig_keygen(seed: bytes) -> SigKeyPair:
    """Derive a P-256 key pair deterministically from 32 bytes of entropy."""
    if len(seed) != SEED_BYTES:
        raise ValueError(f"keygen seed must be {SEED_BYTES} bytes")
    scalar = int.from_bytes(hashlib.sha256(b"sig-keygen\x00" + seed).digest(), "big")
    secret = ec.derive_private_key(scalar % (_CURVE_ORDER - 1) + 1, _CURVE)
    return SigKeyPair(public=secret.public_key(), secret=secret)


def sig_sign(secret: ec.EllipticCurvePrivateKey, message: bytes) -> Signature:
    # Deterministic nonces (RFC 6979 style) keep whole runs bit-reproducible.
    return Signature(secret.sign(message, ec.ECDSA(hashes.SHA256(), deterministic_signing=True)))


def sig_verify(public: ec.EllipticCurvePublicKey, message: bytes, sig: Signature) -> bool:
    """True iff ``sig`` was produced by the matching secret key over exactly
    ``message``. Malformed signature bytes yield False, never an exception."""
    try:
        public.verify(sig.raw, message, ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


# ---------------------------------------------------------------------------
# Attestation-style key agreement (ephemeral ECDH + measurement-bound KDF)
# ---------------------------------------------------------------------------

def ecdh_keypair(rng: Random) -> tuple[ec.EllipticCurvePrivateKey, bytes]:
    """Ephemeral ECDH key pair; returns (private key, X9.62 public point)."""
    scalar = int.from_bytes(rng.randbytes(32), "big") % (_CURVE_ORDER - 1) + 1
    priv = ec.derive_private_key(scalar, _CURVE)
    point = priv.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
    )
    return priv, point


def derive_session_key(
    priv: ec.EllipticCurvePrivateKey,
    peer_point: bytes,
    initiator: str,
    enclave_id: int,
    measurement: bytes,
) -> SymKey:
    """KDF over the ECDH secret, both identifiers, and the program measurement.

    A party that disagrees about the measurement derives a different key, so
    the binding holds even if the mismatch check were bypassed.
    """
    shared = priv.exchange(ec.ECDH(), load_public_key(peer_point))
    ident = initiator.encode()
    material = b"".join(
        (
            b"ra-session-kdf\x00",
            shared,
            struct.pack(">H", len(ident)),
            ident,
            struct.pack(">Q", enclave_id),
            measurement,
        )
    )
    return SymKey(hashlib.sha256(material).digest()[:KEY_BYTES])


# ---------------------------------------------------------------------------
# Associated-data layouts (context binding for envelopes)
# ---------------------------------------------------------------------------

def model_aad(taskid: bytes, round_index: int, sender: int) -> bytes:
    """AAD for client model envelopes: binds task, round, and sender."""
    return struct.pack(">H", len(taskid)) + taskid + struct.pack(">QQ", round_index, sender)


def msk_aad(taskid: bytes, round_index: int, sender: int) -> bytes:
    """AAD for the master-key envelope riding along with each model."""
    return b"msk\x00" + model_aad(taskid, round_index, sender)


def keydeliver_aad(taskid: bytes, purpose: bytes) -> bytes:
    """AAD for committee key/round/partition deliveries into an enclave."""
    return b"commit\x00" + struct.pack(">H", len(taskid)) + taskid + purpose


def output_aad(taskid: bytes, round_index: int, chunk_base: int) -> bytes:
    """AAD for an enclave's encrypted aggregation output."""
    return struct.pack(">H", len(taskid)) + taskid + struct.pack(">QI", round_index, chunk_base)
