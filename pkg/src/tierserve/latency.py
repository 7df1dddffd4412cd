"""Batch latency regression over roofline features.

A batch with ``F`` flops and ``M`` bytes of memory traffic maps to
``t_F = F / flops_cap`` and ``t_M = M / mem_bw``; latency is a linear model
over ``(t_M + t_F, max(t_M, t_F), t_M, t_F, 1)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .arch import CostBreakdown, ModelArch, prefill_cost

logger = logging.getLogger(__name__)

A100_FLOPS = 312e12
A100_MEM_BW = 2e12
RIDGE_LAMBDA = 1e-8
MIN_RECORDS = 20
# roofline max plus a fixed launch overhead; a simulation default, not a measured fit
DEFAULT_COEFFS = (0.0, 1.0, 0.0, 0.0, 3e-4)


class InsufficientDataError(ValueError):
    pass


class CalibrationError(ArithmeticError):
    pass


@dataclass
class LatencyModel:
    coeffs: tuple[float, float, float, float, float] = DEFAULT_COEFFS
    flops_cap: float = A100_FLOPS
    mem_bw: float = A100_MEM_BW
    train_error: float | None = None  # in-sample median abs relative error
    n_clamped: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        self.coeffs = tuple(float(c) for c in self.coeffs)
        if len(self.coeffs) != 5:
            raise ValueError("a latency model has exactly 5 coefficients")
        if self.flops_cap <= 0 or self.mem_bw <= 0:
            raise ValueError("hardware capacities must be positive")

    def features(self, cost: CostBreakdown) -> tuple[float, float, float, float, float]:
        return features(cost.flops, cost.mem_bytes, self.flops_cap, self.mem_bw)

    def predict(self, cost: CostBreakdown) -> float:
        return self.predict_raw(cost.flops, cost.mem_bytes)

    def predict_raw(self, flops: float, mem_bytes: float) -> float:
        t_f = flops / self.flops_cap
        t_m = mem_bytes / self.mem_bw
        c1, c2, c3, c4, c5 = self.coeffs
        t = c1 * (t_m + t_f) + c2 * max(t_m, t_f) + c3 * t_m + c4 * t_f + c5
        if t < 0.0:
            if self.n_clamped == 0:
                logger.warning("latency model predicted %.3g s; clamping to 0 (check calibration)", t)
            self.n_clamped += 1
            return 0.0
        return t


def features(flops: float, mem_bytes: float, flops_cap: float, mem_bw: float):
    t_f = flops / flops_cap
    t_m = mem_bytes / mem_bw
    return (t_m + t_f, max(t_m, t_f), t_m, t_f, 1.0)


@dataclass(frozen=True)
class ObservedBatchRecord:
    flops: float
    mem_bytes: float
    latency: float
    num_prefill: int = 0
    num_decode: int = 0
    prefill_tokens: int = 0
    decode_tokens: int = 0

    def __post_init__(self):
        if not self.latency > 0:
            raise ValueError(f"observed latency must be > 0, got {self.latency}")


def _design(records: Sequence[ObservedBatchRecord], flops_cap: float, mem_bw: float):
    X = np.array([features(r.flops, r.mem_bytes, flops_cap, mem_bw) for r in records])
    y = np.array([r.latency for r in records])
    return X, y


def relative_errors(model: LatencyModel, records: Sequence[ObservedBatchRecord]) -> np.ndarray:
    pred = np.array([model.predict_raw(r.flops, r.mem_bytes) for r in records])
    obs = np.array([r.latency for r in records])
    return np.abs(pred - obs) / obs


def fit(
    records: Sequence[ObservedBatchRecord],
    flops_cap: float = A100_FLOPS,
    mem_bw: float = A100_MEM_BW,
    ridge: float = RIDGE_LAMBDA,
) -> LatencyModel:
    """Ridge least-squares fit of the five coefficients.

    The feature set is exactly collinear (sum == memory + compute), so the
    plain normal equations are singular; a tiny ridge picks the minimum-norm
    solution. Columns are RMS-normalised first so ``ridge`` is scale-free.
    """
    if len(records) < MIN_RECORDS:
        raise InsufficientDataError(f"need at least {MIN_RECORDS} records, got {len(records)}")
    X, y = _design(records, flops_cap, mem_bw)
    ratios = {(round(a, 12), round(b, 12)) for a, b in zip(X[:, 2], X[:, 3])}
    if len(ratios) < 2:
        raise InsufficientDataError("records must span at least two distinct (t_M, t_F) points")
    scale = np.sqrt(np.mean(X * X, axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    A = np.vstack([Xs, np.sqrt(ridge) * np.eye(5)])
    b = np.concatenate([y, np.zeros(5)])
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 5 or not np.all(np.isfinite(sol)):
        raise CalibrationError("regularised least-squares system is singular")
    coeffs = tuple(float(c) for c in sol / scale)
    model = LatencyModel(coeffs, flops_cap, mem_bw)
    model.train_error = float(np.median(relative_errors(model, records)))
    return model


def refit_online(
    model: LatencyModel, new_records: Sequence[ObservedBatchRecord], window: int = 200
) -> LatencyModel:
    """Refit on the most recent ``window`` records; keep ``model`` if it does no worse."""
    if window < MIN_RECORDS:
        raise ValueError(f"window must be >= {MIN_RECORDS}")
    recent = list(new_records)[-window:]
    if len(recent) < MIN_RECORDS:
        return model
    try:
        candidate = fit(recent, model.flops_cap, model.mem_bw)
    except (InsufficientDataError, CalibrationError) as exc:
        logger.info("online refit skipped: %s", exc)
        return model
    old_err = float(np.median(relative_errors(model, recent)))
    if candidate.train_error > old_err:
        return replace(model, train_error=old_err)
    return candidate


def worst_case_batch_latency(model: LatencyModel, arch: ModelArch, max_batch_tokens: int) -> float:
    """Latency of the costliest admissible prefill batch: one prompt filling the budget."""
    if max_batch_tokens < 1:
        raise ValueError("max_batch_tokens must be >= 1")
    return model.predict(prefill_cost(arch, [max_batch_tokens]))


RECORD_COLUMNS = ("flops", "mem_bytes", "latency_s", "b_p", "b_d", "prefill_tokens", "decode_tokens")


def write_records(path: str | Path, records: Iterable[ObservedBatchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([repr(float(r.flops)), repr(float(r.mem_bytes)), repr(r.latency),
                        r.num_prefill, r.num_decode, r.prefill_tokens, r.decode_tokens])


def read_records(path: str | Path) -> list[ObservedBatchRecord]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip() == "flops"):
                continue
            try:
                # batch-shape columns are optional
                if len(row) not in (3, len(RECORD_COLUMNS)):
                    raise ValueError(f"expected 3 or {len(RECORD_COLUMNS)} columns, got {len(row)}")
                f, m, lat = (float(x) for x in row[:3])
                shape = (int(x) for x in row[3:])
                out.append(ObservedBatchRecord(f, m, lat, *shape))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def save_model(path: str | Path, model: LatencyModel) -> None:
    lines = [
        "[latency]",
        "coeffs = [" + ", ".join(repr(c) for c in model.coeffs) + "]",
        f"flops_cap = {model.flops_cap!r}",
        f"mem_bw = {model.mem_bw!r}",
    ]
    if model.train_error is not None:
        lines.append(f"train_error = {model.train_error!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: str | Path) -> LatencyModel:
    from .config import load_toml

    data = load_toml(path).get("latency", {})
    return LatencyModel(
        tuple(data["coeffs"]),
        float(data.get("flops_cap", A100_FLOPS)),
        float(data.get("mem_bw", A100_MEM_BW)),
        data.get("train_error"),
    )
