"""Discrete-event simulator for tiered LLM serving.

Low-priority (LP) instances pack prefills around ongoing decodes out of
arrival order; high-priority (HP) instances run prefill first and absorb
requests whose first-token deadline is at risk.
"""

__version__ = "0.1.0"

from .arch import (BatchComposition, ConfigError, CostBreakdown, ModelArch, PrefillChunk, decode_cost, get_preset,
                   hybrid_cost, kv_bytes_per_token, prefill_cost)
from .config import SimConfig, build_config, parse_config
from .engine import SimResult, Simulation, run
from .latency import LatencyModel, ObservedBatchRecord, fit
from .metrics import RequestOutcome, goodput, outcomes_of, summarize
from .workload import Request, SloSpec, State

__all__ = [
    "BatchComposition", "ConfigError", "CostBreakdown", "LatencyModel", "ModelArch", "ObservedBatchRecord",
    "PrefillChunk", "Request", "RequestOutcome", "SimConfig", "SimResult", "Simulation", "SloSpec", "State",
    "build_config", "decode_cost", "fit", "get_preset", "goodput", "hybrid_cost", "kv_bytes_per_token",
    "outcomes_of", "parse_config", "prefill_cost", "run", "summarize",
]
