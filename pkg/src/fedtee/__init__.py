"""fedtee: a desk-scale simulator for TEE-backed, ledger-verified FL aggregation.

Clients encrypt local model updates to attested (simulated) enclaves hosted
on execution nodes; enclaves aggregate, re-encrypt under the task master key,
and sign transaction-sized chunks that an append-only ledger verifies before
storing. A committee schedules partitions under enclave memory budgets and
migrates them off dead nodes on heartbeat loss.
"""

from .config import MODEL_PRESETS, RunConfig
from .harness import RunReport, oracle_run, run_task, traffic_fedtee, traffic_vanilla_fl
from .ledger import CHAIN_PRESETS

__all__ = [
    "MODEL_PRESETS",
    "CHAIN_PRESETS",
    "RunConfig",
    "RunReport",
    "run_task",
    "oracle_run",
    "traffic_vanilla_fl",
    "traffic_fedtee",
]

__version__ = "0.1.0"
