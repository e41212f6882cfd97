"""Run configuration: model presets, chain presets, cost model, fault schedule.

Config files are JSON with the same keys as :class:`RunConfig`. Model presets
carry a declared parameter count and byte size; the synthetic layer
structure is sized so its 8-byte elements occupy the preset's byte size
within 1%, which is what the capacity planner actually packs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model


@dataclass(frozen=True)
class ModelPreset:
    name: str
    parameters: int
    size_bytes: int

    @property
    def size_mb(self) -> float:
        return self.size_bytes / 1e6


MODEL_PRESETS = {
    "mlp": ModelPreset("mlp", 10_901, 42_580),            # 42.58 KB
    "cnn": ModelPreset("cnn", 22_340, 85_310),            # 85.31 KB
    "resnet18": ModelPreset("resnet18", 11_180_000, 42_640_000),   # 42.64 MB
    "resnet50": ModelPreset("resnet50", 21_290_000, 81_200_000),   # 81.20 MB
    "alexnet": ModelPreset("alexnet", 1_250_000, 4_760_000),       # 4.76 MB
    "bert": ModelPreset("bert", 97_540_000, 390_160_000),          # 390.16 MB
}


def preset_layer_meta(preset: ModelPreset, n_layers: int = 8) -> dict[int, int]:
    """Split the preset's element budget into ``n_layers`` near-equal layers."""
    total = preset.size_bytes // 8
    base, extra = divmod(total, n_layers)
    return {i: base + (1 if i < extra else 0) for i in range(n_layers)}


@dataclass
class CostModel:
    """Virtual-clock charges; only ratios matter, the units are nanoseconds
    per byte for compute and milliseconds for protocol steps."""

    proc_ns_per_byte: float = 1.0
    paging_ns_per_byte: float = 10.0
    connect_ms_per_attestation: float = 5.0
    reschedule_ms: float = 2.0
    straggler_timeout_ms: float = 100.0


@dataclass
class FaultEvent:
    kind: str  # "kill_node" | "drop" | "tamper_chunk"
    round: int = 0
    phase: str = "between"  # kill point: "between" rounds or mid-round "collect"
    node: int | None = None
    message_kind: str | None = None  # for drops
    src: str | None = None
    dest: str | None = None
    count: int = 1


@dataclass
class RunConfig:
    taskid: str = "task-0"
    n_clients: int = 10
    n_nodes: int = 4
    rounds: int = 5
    participation: float = 0.10
    strategy: str = "single"  # single | clientmax | layermax
    chain: str = "fabric"
    model_preset: str | None = None
    preset_layers: int = 8
    layers: dict[int, int] = field(default_factory=lambda: {0: 16, 1: 16})
    epc_budget: int = 128 * 1024 * 1024
    tx_capacity: int = 2 * 1024 * 1024
    seed: int = 0
    int_mode: bool = False
    paging: bool = False
    perturb: float = 0.05
    sentinel: bool = False
    taps: bool = False
    heartbeat_interval_ms: float = 500.0
    failover_threshold: int = 3
    straggler_policy: str = "wait-all"  # or "exclude"
    straggler_max_retries: int = 5
    uniform_random_participants: bool = False
    bandwidth_bytes_per_ms: float | None = None  # client->node cap; None = unconstrained
    cost: CostModel = field(default_factory=CostModel)
    faults: list[FaultEvent] = field(default_factory=list)

    def __post_init__(self) -> None:
        if isinstance(self.layers, dict):
            self.layers = {int(k): int(v) for k, v in self.layers.items()}

    @property
    def taskid_bytes(self) -> bytes:
        return self.taskid.encode()

    def model_meta(self) -> dict[int, int]:
        if self.model_preset is not None:
            return preset_layer_meta(MODEL_PRESETS[self.model_preset], self.preset_layers)
        return dict(self.layers)

    def to_json(self) -> str:
        obj = asdict(self)
        obj["layers"] = {str(k): v for k, v in self.layers.items()}
        return json.dumps(obj, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        obj = json.loads(text)
        if "cost" in obj and isinstance(obj["cost"], dict):
            obj["cost"] = CostModel(**obj["cost"])
        if "faults" in obj:
            obj["faults"] = [FaultEvent(**f) for f in obj["faults"]]
        return cls(**obj)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def load_fault_schedule(path: str) -> list[FaultEvent]:
    with open(path, "r", encoding="utf-8") as fh:
        return [FaultEvent(**f) for f in json.load(fh)]


def initial_model(config: RunConfig) -> model.WeightVector:
    """Seeded initial weights in [-1, 1); on the dyadic grid in int mode."""
    digest = hashlib.sha256(struct.pack(">Q", config.seed) + b"m_init").digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    meta = config.model_meta()
    layers = []
    for idx in sorted(meta):
        if config.int_mode:
            values = rng.integers(-256, 257, size=meta[idx]) * model.INT_MODE_QUANTUM
        else:
            values = rng.uniform(-1.0, 1.0, size=meta[idx])
        layers.append(model.Layer(idx, values))
    return model.WeightVector(layers)


# Planted in every synthetic local update when leak detection is on: two
# adjacent float64 elements whose little-endian bytes form this pattern.
SENTINEL = bytes.fromhex("deadbeefcafef00d" "0ddf0efac2b3a1d0")
