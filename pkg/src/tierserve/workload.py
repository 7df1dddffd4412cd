"""Request streams: length traces, Poisson arrivals, SLO assignment."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch import ConfigError


class State(enum.Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    COMPLETED = "completed"
    DROPPED = "dropped"


_ALLOWED = {
    (State.QUEUED, State.PREFILLING),
    (State.QUEUED, State.DROPPED),
    (State.PREFILLING, State.DECODING),
    (State.PREFILLING, State.QUEUED),
    (State.DECODING, State.QUEUED),
    (State.DECODING, State.COMPLETED),
}


class InvalidTransition(RuntimeError):
    pass


@dataclass(slots=True, eq=False)
class Request:
    id: int
    arrival_time: float
    prompt_len: int
    output_len: int  # ground truth; only the engine reads it
    ttft_slo: float
    tbt_slo: float
    state: State = State.QUEUED
    tokens_prefilled: int = 0
    tokens_decoded: int = 0
    first_token_time: float | None = None
    completion_time: float | None = None
    prefill_start_time: float | None = None
    home_instance: int | None = None
    serving_instance: int | None = None  # instance where prefill first started
    offloaded: bool = False
    ticketed: bool = False
    preemption_count: int = 0
    effective_prompt_len: int = 0
    queue_enter_time: float = 0.0
    instance_queue_delay: float | None = None
    last_token_time: float | None = None
    tbt_samples: int = 0
    drop_time: float | None = None

    def __post_init__(self):
        if self.prompt_len < 1 or self.output_len < 1:
            raise ValueError("prompt_len and output_len must be >= 1")
        if not self.effective_prompt_len:
            self.effective_prompt_len = self.prompt_len
        self.queue_enter_time = self.arrival_time

    @property
    def deadline(self) -> float:
        return self.arrival_time + self.ttft_slo

    @property
    def context_len(self) -> int:
        """Tokens whose KV the next decode step reads (prompt + generated)."""
        return self.prompt_len + self.tokens_decoded

    @property
    def remaining_prefill(self) -> int:
        return self.effective_prompt_len - self.tokens_prefilled

    @property
    def sort_key(self) -> tuple[float, int]:
        return (self.arrival_time, self.id)

    def transition(self, new: State) -> None:
        if (self.state, new) not in _ALLOWED:
            raise InvalidTransition(f"request {self.id}: {self.state.name} -> {new.name}")
        self.state = new

    def emit_token(self, now: float) -> None:
        if self.first_token_time is None:
            self.first_token_time = now
        else:
            self.tbt_samples += 1
        self.last_token_time = now
        self.tokens_decoded += 1


@dataclass(frozen=True)
class TraceEntry:
    prompt_len: int
    output_len: int

    def __post_init__(self):
        if self.prompt_len < 1 or self.output_len < 1:
            raise ValueError(f"trace lengths must be >= 1, got {self.prompt_len}, {self.output_len}")


@dataclass(frozen=True)
class SloSpec:
    ttft_slo: float
    tbt_slo: float
    slo_scale: float = 1.0

    def __post_init__(self):
        if min(self.ttft_slo, self.tbt_slo, self.slo_scale) <= 0:
            raise ValueError("SLO values and scale must be positive")

    @property
    def ttft(self) -> float:
        return self.ttft_slo * self.slo_scale

    @property
    def tbt(self) -> float:
        return self.tbt_slo * self.slo_scale

    def scaled(self, scale: float) -> "SloSpec":
        return SloSpec(self.ttft_slo, self.tbt_slo, scale)


# (model, dataset) -> (ttft seconds, tbt seconds)
SLO_PRESETS: dict[tuple[str, str], tuple[float, float]] = {
    ("mistral-7b", "sharegpt"): (1.0, 0.15),
    ("llama3.1-8b", "sharegpt"): (1.0, 0.15),
    ("qwen-14b", "sharegpt"): (1.5, 0.15),
    ("mistral-7b", "longbench"): (2.5, 0.15),
    ("llama3.1-8b", "longbench"): (2.5, 0.15),
    ("qwen-14b", "longbench"): (3.0, 0.15),
}


def slo_preset(model: str, dataset: str, slo_scale: float = 1.0) -> SloSpec:
    try:
        ttft, tbt = SLO_PRESETS[(model.lower(), dataset.lower())]
    except KeyError:
        raise ConfigError(f"no SLO preset for model={model!r} dataset={dataset!r}") from None
    return SloSpec(ttft, tbt, slo_scale)


def poisson_arrivals(rate_qps: float, duration_s: float, seed: int) -> list[float]:
    if rate_qps < 0 or duration_s < 0:
        raise ValueError("rate and duration must be non-negative")
    if rate_qps == 0 or duration_s == 0:
        return []
    rng = np.random.default_rng(seed)
    times: list[float] = []
    t = 0.0
    block = max(16, int(rate_qps * duration_s * 1.1) + 16)
    while True:
        gaps = rng.exponential(1.0 / rate_qps, size=block)
        for g in gaps:
            t += float(g)
            if t >= duration_s:
                return times
            times.append(t)


def load_trace(path: str | Path) -> list[TraceEntry]:
    """Read ``prompt_len,output_len`` rows; a non-numeric first row is a header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    entries = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                continue
            try:
                if len(row) < 2:
                    raise ValueError("expected 2 columns")
                entries.append(TraceEntry(int(row[0]), int(row[1])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad trace row {row!r}: {exc}") from None
    if not entries:
        raise ValueError(f"{path}: trace is empty")
    return entries


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution: lognormal, uniform, constant, or a mixture."""

    kind: str
    params: dict = field(default_factory=dict)
    min_len: int = 1
    max_len: int = 32768

    @classmethod
    def from_dict(cls, d: dict) -> "LengthDist":
        d = dict(d)
        kind = d.pop("kind", None)
        lo = int(d.pop("min", 1))
        hi = int(d.pop("max", 32768))
        if kind == "mixture":
            comps = d.pop("components", None)
            if not comps:
                raise ConfigError("mixture needs components")
            d["components"] = [(float(c.get("weight", 1.0)), cls.from_dict({k: v for k, v in c.items() if k != "weight"}))
                               for c in comps]
        dist = cls(kind, d, lo, hi)
        dist._validate()
        return dist

    def _validate(self):
        p = self.params
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(f"invalid length bounds [{self.min_len}, {self.max_len}]")
        if self.kind == "lognormal":
            if set(p) != {"mu", "sigma"} or p["sigma"] <= 0:
                raise ConfigError(f"lognormal needs mu and sigma > 0, got {p}")
        elif self.kind == "uniform":
            if set(p) != {"low", "high"} or not 1 <= p["low"] <= p["high"]:
                raise ConfigError(f"uniform needs 1 <= low <= high, got {p}")
        elif self.kind == "constant":
            if set(p) != {"value"} or p["value"] < 1:
                raise ConfigError(f"constant needs value >= 1, got {p}")
        elif self.kind == "mixture":
            ws = [w for w, _ in p["components"]]
            if min(ws) < 0 or sum(ws) <= 0:
                raise ConfigError("mixture weights must be non-negative with positive sum")
        else:
            raise ConfigError(f"unknown length distribution kind {self.kind!r}")

    def raw_sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.params
        if self.kind == "lognormal":
            return rng.lognormal(p["mu"], p["sigma"], size=n)
        if self.kind == "uniform":
            return rng.integers(int(p["low"]), int(p["high"]) + 1, size=n).astype(float)
        if self.kind == "constant":
            return np.full(n, float(p["value"]))
        weights = np.array([w for w, _ in p["components"]], dtype=float)
        which = rng.choice(len(weights), size=n, p=weights / weights.sum())
        out = np.empty(n)
        for i, (_, comp) in enumerate(p["components"]):
            idx = np.flatnonzero(which == i)
            out[idx] = comp.sample(rng, len(idx))
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.clip(np.rint(self.raw_sample(rng, n)), self.min_len, self.max_len).astype(np.int64)


DATASET_PRESETS: dict[str, dict] = {
    "sharegpt": {
        "prompt": {"kind": "lognormal", "mu": 6.2, "sigma": 1.0, "min": 4, "max": 8192},
        "output": {"kind": "lognormal", "mu": 5.3, "sigma": 0.8, "min": 1, "max": 2048},
    },
    "longbench": {
        "prompt": {"kind": "lognormal", "mu": 8.6, "sigma": 0.45, "min": 256, "max": 16000},
        "output": {"kind": "lognormal", "mu": 4.6, "sigma": 0.5, "min": 1, "max": 1024},
    },
}


def synth_trace(dist_spec: dict, count: int, seed: int) -> list[TraceEntry]:
    """Sample ``count`` (prompt, output) pairs; ``dist_spec`` has ``prompt`` and ``output`` dists."""
    if count < 0:
        raise ValueError("count must be non-negative")
    try:
        prompt = LengthDist.from_dict(dist_spec["prompt"])
        output = LengthDist.from_dict(dist_spec["output"])
    except KeyError as exc:
        raise ConfigError(f"distribution spec missing {exc}") from None
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    ps = prompt.sample(rng, count)
    os_ = output.sample(rng, count)
    return [TraceEntry(int(p), int(o)) for p, o in zip(ps, os_)]


def build_requests(
    entries: Sequence[TraceEntry],
    arrivals: Sequence[float],
    slo: SloSpec,
    seed: int = 0,
) -> list[Request]:
    """Pair arrivals with trace entries in order, resampling with replacement if the trace is short."""
    if not arrivals:
        return []
    if not entries:
        raise ValueError("no trace entries")
    if len(entries) >= len(arrivals):
        chosen = list(entries[: len(arrivals)])
    else:
        rng = np.random.default_rng(seed)
        chosen = [entries[i] for i in rng.integers(0, len(entries), size=len(arrivals))]
    return [
        Request(i, float(t), e.prompt_len, e.output_len, slo.ttft, slo.tbt)
        for i, (t, e) in enumerate(zip(sorted(arrivals), chosen))
    ]


def lognormal_mean(mu: float, sigma: float) -> float:
    return math.exp(mu + sigma * sigma / 2)
