"""Per-request outcomes, goodput and summary statistics."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from .workload import Request, SloSpec, State


class UndefinedMetric(ValueError):
    pass


@dataclass(frozen=True)
class RequestOutcome:
    id: int
    arrival_time: float
    prompt_len: int
    output_len: int
    tokens_generated: int
    ttft: float | None
    mean_tbt: float | None  # None when a single token was produced
    completed: bool
    dropped: bool
    scheduling_delay: float | None  # first prefill start - arrival
    instance_queue_delay: float | None  # prefill start - entry into the serving instance's queue
    path: str  # "LP" or "HP": role of the instance that ran the prefill
    home_instance: int | None
    serving_instance: int | None
    offloaded: bool
    ticketed: bool
    preemptions: int
    tbt_samples: int
    ttft_slo: float
    tbt_slo: float

    def meets(self, ttft_slo: float | None = None, tbt_slo: float | None = None) -> bool:
        ttft_slo = self.ttft_slo if ttft_slo is None else ttft_slo
        tbt_slo = self.tbt_slo if tbt_slo is None else tbt_slo
        if not self.completed or self.ttft is None or self.ttft > ttft_slo:
            return False
        return self.mean_tbt is None or self.mean_tbt <= tbt_slo


def outcome_of(r: Request, hp_ids: Iterable[int] = ()) -> RequestOutcome:
    completed = r.state is State.COMPLETED
    ttft = None if r.first_token_time is None else r.first_token_time - r.arrival_time
    mean_tbt = None
    if completed and r.output_len > 1:
        mean_tbt = (r.completion_time - r.first_token_time) / (r.output_len - 1)
    sched = None if r.prefill_start_time is None else r.prefill_start_time - r.arrival_time
    path = "HP" if r.serving_instance is not None and r.serving_instance in set(hp_ids) else "LP"
    return RequestOutcome(
        r.id, r.arrival_time, r.prompt_len, r.output_len, r.tokens_decoded, ttft, mean_tbt,
        completed, r.state is State.DROPPED, sched, r.instance_queue_delay, path,
        r.home_instance, r.serving_instance, r.offloaded, r.ticketed, r.preemption_count,
        r.tbt_samples, r.ttft_slo, r.tbt_slo,
    )


def outcomes_of(result) -> list[RequestOutcome]:
    from .scheduler import Role

    hp_ids = {i.id for i in result.instances if i.role is Role.HP}
    return [outcome_of(r, hp_ids) for r in result.requests]


def outcomes_from_events(events: Iterable[tuple], hp_ids: Iterable[int] = ()) -> list[RequestOutcome]:
    """Rebuild outcomes from an event log (``time, instance, event, request_id, detail`` rows).

    Needs a log recorded with ``engine.log_events``; the result matches
    :func:`outcomes_of` on the live run field for field.
    """
    hp = set(hp_ids)
    reqs: dict[int, dict] = {}
    for t, inst, kind, rid, detail in events:
        if rid is None:
            continue
        if kind == "arrival":
            fields_ = dict(kv.split("=", 1) for kv in detail.split(";") if "=" in kv)
            reqs[rid] = {
                "arrival": t, "prompt": int(fields_["prompt"]), "output": int(fields_["output"]),
                "ttft_slo": float(fields_["ttft_slo"]), "tbt_slo": float(fields_["tbt_slo"]),
                "ticketed": "ticket" in detail.split(";"), "home": inst, "enter": t,
                "start": None, "queue_delay": None, "serving": None, "first": None, "done": None,
                "dropped": False, "offloaded": False, "preempt": 0, "tokens": 0, "tbt_samples": 0,
            }
            continue
        r = reqs[rid]
        if kind == "offload_arrive":
            r["offloaded"] = True
            r["enter"] = t
        elif kind == "prefill_start" and r["start"] is None:
            r["start"], r["serving"], r["queue_delay"] = t, inst, t - r["enter"]
        elif kind == "prefill_done" and r["first"] is None:
            r["first"] = t
        elif kind == "complete":
            r["done"] = t
        elif kind == "drop":
            r["dropped"] = True
            # a request that outgrew the cache after decoding carries its token counts
            fields_ = dict(kv.split("=", 1) for kv in detail.split(";") if "=" in kv)
            r["tokens"] = int(fields_.get("tokens", 0))
            r["tbt_samples"] = int(fields_.get("tbt_samples", 0))
        elif kind == "preempt":
            r["preempt"] += 1
    out = []
    for rid in sorted(reqs):
        r = reqs[rid]
        completed = r["done"] is not None
        mean_tbt = None
        if completed and r["output"] > 1:
            mean_tbt = (r["done"] - r["first"]) / (r["output"] - 1)
        out.append(RequestOutcome(
            rid, r["arrival"], r["prompt"], r["output"], r["output"] if completed else r["tokens"],
            None if r["first"] is None else r["first"] - r["arrival"], mean_tbt, completed, r["dropped"],
            None if r["start"] is None else r["start"] - r["arrival"], r["queue_delay"],
            "HP" if r["serving"] is not None and r["serving"] in hp else "LP",
            r["home"], r["serving"], r["offloaded"], r["ticketed"], r["preempt"],
            r["output"] - 1 if completed else r["tbt_samples"], r["ttft_slo"], r["tbt_slo"],
        ))
    return out


def goodput(outcomes: Sequence[RequestOutcome], slo: SloSpec | None = None) -> float:
    """Fraction of requests meeting both the TTFT SLO and the mean-TBT SLO.

    Dropped requests stay in the denominator. With ``slo`` given, its scaled
    targets replace each request's own.
    """
    if not outcomes:
        raise UndefinedMetric("goodput of an empty outcome set")
    if slo is None:
        good = sum(o.meets() for o in outcomes)
    else:
        good = sum(o.meets(slo.ttft, slo.tbt) for o in outcomes)
    return good / len(outcomes)


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile."""
    if not values:
        raise UndefinedMetric("percentile of an empty sequence")
    if not 0 <= q <= 100:
        raise ValueError(f"q must be in [0, 100], got {q}")
    ordered = sorted(values)
    k = max(1, math.ceil(q / 100 * len(ordered)))
    return ordered[k - 1]


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else float("nan")


@dataclass
class SummaryStats:
    goodput: float
    throughput_tokens_s: float
    throughput_requests_s: float
    p50_ttft: float
    p90_ttft: float
    p99_ttft: float
    mean_ttft: float
    mean_tbt: float
    mean_scheduling_delay: float
    scheduling_delay_by_path: dict[str, float] = field(default_factory=dict)
    scheduling_delay_by_instance: dict[int, float] = field(default_factory=dict)
    count: int = 0
    completed: int = 0
    dropped: int = 0
    violated: int = 0
    offloaded: int = 0
    ticketed: int = 0
    preemptions: int = 0


def in_window(outcomes: Sequence[RequestOutcome], window: tuple[float, float] | None) -> list[RequestOutcome]:
    if window is None:
        return list(outcomes)
    lo, hi = window
    return [o for o in outcomes if lo <= o.arrival_time < hi]


def summarize(
    outcomes: Sequence[RequestOutcome],
    slo: SloSpec | None = None,
    window: tuple[float, float] | None = None,
) -> SummaryStats:
    """Summary over requests arriving inside ``window`` (``[start, end)`` seconds)."""
    sel = in_window(outcomes, window)
    if not sel:
        raise UndefinedMetric("no requests in the measurement window")
    if window is None:
        span = max(o.arrival_time for o in sel) - min(o.arrival_time for o in sel)
    else:
        span = window[1] - window[0]
    gp = goodput(sel, slo)
    ttfts = [o.ttft for o in sel if o.ttft is not None]
    tbts = [o.mean_tbt for o in sel if o.mean_tbt is not None]
    tokens = sum(o.tokens_generated for o in sel if o.completed)
    completed = sum(o.completed for o in sel)
    dropped = sum(o.dropped for o in sel)
    good = round(gp * len(sel))
    by_path: dict[str, list[float]] = defaultdict(list)
    by_inst: dict[int, list[float]] = defaultdict(list)
    for o in sel:
        if o.instance_queue_delay is not None:
            by_path[o.path].append(o.instance_queue_delay)
            by_inst[o.serving_instance].append(o.instance_queue_delay)
    nan = float("nan")
    return SummaryStats(
        goodput=gp,
        throughput_tokens_s=tokens / span if span > 0 else nan,
        throughput_requests_s=completed / span if span > 0 else nan,
        p50_ttft=percentile(ttfts, 50) if ttfts else nan,
        p90_ttft=percentile(ttfts, 90) if ttfts else nan,
        p99_ttft=percentile(ttfts, 99) if ttfts else nan,
        mean_ttft=_mean(ttfts),
        mean_tbt=_mean(tbts),
        mean_scheduling_delay=_mean([o.scheduling_delay for o in sel if o.scheduling_delay is not None]),
        scheduling_delay_by_path={k: _mean(v) for k, v in sorted(by_path.items())},
        scheduling_delay_by_instance={k: _mean(v) for k, v in sorted(by_inst.items())},
        count=len(sel),
        completed=completed,
        dropped=dropped,
        violated=completed - good,
        offloaded=sum(o.offloaded for o in sel),
        ticketed=sum(o.ticketed for o in sel),
        preemptions=sum(o.preemptions for o in sel),
    )


RESULT_COLUMNS = ("config_hash", "qps", "slo_scale", "seed", "scheduler", "policy", "goodput", "p99_ttft",
                  "mean_tbt", "throughput_tokens_s", "completed", "dropped", "violated", "lp_sched_delay",
                  "hp_sched_delay", "status")


def write_results(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in RESULT_COLUMNS})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_outcomes(path: str | Path, outcomes: Sequence[RequestOutcome]) -> None:
    names = [f.name for f in fields(RequestOutcome)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for o in outcomes:
            w.writerow({k: ("" if v is None else _fmt(v)) for k, v in asdict(o).items()})


def read_outcomes(path: str | Path) -> list[RequestOutcome]:
    out = []
    types = {f.name: f.type for f in fields(RequestOutcome)}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                if v == "":
                    kw[k] = None
                elif t in ("int", "int | None"):
                    kw[k] = int(v)
                elif t in ("float", "float | None"):
                    kw[k] = float(v)
                elif t == "bool":
                    kw[k] = v == "True"
                else:
                    kw[k] = v
            out.append(RequestOutcome(**kw))
    return out
