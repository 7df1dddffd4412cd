"""Command-line front door: single runs, sweeps, latency-model fitting."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .arch import PRESETS, ConfigError
from .config import build_config, load_toml, reference_page
from .engine import run as run_sim
from .engine import write_event_log
from .latency import (A100_FLOPS, A100_MEM_BW, CalibrationError, InsufficientDataError, fit, read_records,
                      relative_errors, save_model)
from .metrics import UndefinedMetric, outcomes_of, summarize, write_outcomes, write_results
from .workload import DATASET_PRESETS, SLO_PRESETS

log = logging.getLogger("tierserve")


@dataclass
class RunSpec:
    config_path: str | None
    overrides: dict[str, Any] = field(default_factory=dict)
    qps: list[float] = field(default_factory=list)
    slo_scales: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str | None = None
    jobs: int = 1

    def __post_init__(self):
        for v in self.qps + self.slo_scales:
            if not v > 0:
                raise ConfigError(f"sweep values must be positive, got {v}")
        if self.jobs < 1:
            raise ConfigError("--jobs must be at least 1")


def _load_raw(path: str | None) -> tuple[dict, Path | None]:
    if path is None:
        return {}, None
    p = Path(path)
    return load_toml(p), p.parent


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def _result_row(config, outcomes, slo=None) -> dict:
    slo = slo or config.slo
    window = (config.engine.warmup, max(config.workload.duration, config.engine.warmup))
    if window[1] <= window[0]:
        window = None
    stats = summarize(outcomes, slo, window)
    return {
        "config_hash": config.config_hash,
        "qps": config.workload.qps,
        "slo_scale": slo.slo_scale,
        "seed": config.workload.seed,
        "scheduler": config.scheduler.variant,
        "policy": config.scheduler.policy.kind.value,
        "goodput": stats.goodput,
        "p99_ttft": stats.p99_ttft,
        "mean_tbt": stats.mean_tbt,
        "throughput_tokens_s": stats.throughput_tokens_s,
        "completed": stats.completed,
        "dropped": stats.dropped,
        "violated": stats.violated,
        "lp_sched_delay": stats.scheduling_delay_by_path.get("LP", float("nan")),
        "hp_sched_delay": stats.scheduling_delay_by_path.get("HP", float("nan")),
        "status": "ok",
    }


def _run_point(raw: dict, base_dir: Path | None, overrides: dict, slo_scales: Sequence[float]) -> list[dict]:
    """One simulation; one row per SLO scale (goodput recomputed on the same outcomes)."""
    try:
        config = build_config(raw, overrides, base_dir)
        outcomes = outcomes_of(run_sim(config))
        if not slo_scales:
            return [_result_row(config, outcomes)]
        rows = []
        for s in slo_scales:
            scaled = build_config(raw, {**overrides, "slo.scale": s}, base_dir)
            row = _result_row(scaled, outcomes, scaled.slo)
            rows.append(row)
        return rows
    except (Exception, AssertionError) as exc:  # recorded per row; the sweep continues
        failed = {**{"qps": overrides.get("workload.qps"), "seed": overrides.get("workload.seed")},
                  "status": f"error: {type(exc).__name__}: {exc}"}
        scales = slo_scales or [overrides.get("slo.scale")]
        return [{**failed, "slo_scale": s} for s in scales]


def run_sweep(spec: RunSpec) -> list[dict]:
    """Run every (qps, seed) point; rows come back sorted by (qps, slo_scale, seed)."""
    raw, base_dir = _load_raw(spec.config_path)
    build_config(raw, spec.overrides, base_dir)  # fail fast on a bad config
    qps_values = spec.qps or [None]
    points = []
    for q in qps_values:
        for seed in spec.seeds:
            ov = dict(spec.overrides)
            ov["workload.seed"] = seed
            if q is not None:
                ov["workload.qps"] = q
            points.append(ov)
    if spec.jobs == 1 or len(points) == 1:
        results = [_run_point(raw, base_dir, ov, spec.slo_scales) for ov in points]
    else:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            futures = [pool.submit(_run_point, raw, base_dir, ov, spec.slo_scales) for ov in points]
            results = [f.result() for f in futures]
    rows = [row for batch in results for row in batch]
    rows.sort(key=lambda r: (_num_or_inf(r.get("qps")), _num_or_inf(r.get("slo_scale")), _num_or_inf(r.get("seed"))))
    return rows


def _num_or_inf(v):
    return float("inf") if v is None else v


def _overrides_from_args(args) -> dict[str, Any]:
    ov: dict[str, Any] = {}
    if getattr(args, "duration", None) is not None:
        ov["workload.duration"] = args.duration
    if getattr(args, "scheduler", None) is not None:
        ov["scheduler.variant"] = args.scheduler
    if getattr(args, "policy", None) is not None:
        ov["scheduler.policy"] = args.policy
    for flag in ("drop", "elastic", "tickets"):
        v = getattr(args, flag, None)
        if v is not None:
            ov[f"scheduler.{flag}"] = v
    return ov


def _print_rows(rows: Sequence[dict]) -> None:
    cols = ("qps", "slo_scale", "seed", "scheduler", "goodput", "p99_ttft", "mean_tbt", "completed", "dropped",
            "status")
    print("  ".join(f"{c:>10}" for c in cols))
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:>10.4g}" if isinstance(v, float) else f"{str(v):>10}")
        print("  ".join(cells))


def _cmd_run(args) -> int:
    raw, base_dir = _load_raw(args.config)
    ov = _overrides_from_args(args)
    if args.qps is not None:
        ov["workload.qps"] = args.qps
    if args.seed is not None:
        ov["workload.seed"] = args.seed
    if args.slo_scale is not None:
        ov["slo.scale"] = args.slo_scale
    config = build_config(raw, ov, base_dir)
    result = run_sim(config)
    outcomes = outcomes_of(result)
    try:
        row = _result_row(config, outcomes)
    except UndefinedMetric as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _print_rows([row])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_results(out / "results.csv", [row])
        write_outcomes(out / "outcomes.csv", outcomes)
        if config.engine.log_events:
            write_event_log(out / "events.csv", result.events)
    return 0


def _cmd_sweep(args) -> int:
    ov = _overrides_from_args(args)
    if not args.qps and not args.slo_scale:
        raise ConfigError("sweep needs --qps and/or --slo-scale lists")
    spec = RunSpec(args.config, ov, qps=args.qps or [], slo_scales=args.slo_scale or [],
                   seeds=args.seed or [0], out_dir=args.out, jobs=args.jobs)
    rows = run_sweep(spec)
    _print_rows(rows)
    if spec.out_dir:
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results(out / "results.csv", rows)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"run qps={r.get('qps')} seed={r.get('seed')} failed: {r['status']}", file=sys.stderr)
    return 1 if failed else 0


def _cmd_fit(args) -> int:
    records = read_records(args.records)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(records))
    n_test = int(round(len(records) * args.holdout))
    test = [records[i] for i in order[:n_test]]
    train = [records[i] for i in order[n_test:]]
    flops_cap = args.flops_cap or A100_FLOPS
    mem_bw = args.mem_bw or A100_MEM_BW
    model = fit(train, flops_cap, mem_bw)
    save_model(args.out, model)
    print(f"fitted on {len(train)} records; in-sample median error {model.train_error:.2%}")
    if test:
        err = relative_errors(model, test)
        print(f"held-out ({len(test)} records): median error {np.median(err):.2%}, "
              f"{np.mean(err < 0.10):.0%} under 10%")
    print(f"wrote {args.out}")
    return 0


def _cmd_validate(args) -> int:
    raw, base_dir = _load_raw(args.config)
    config = build_config(raw, _overrides_from_args(args), base_dir)
    print(f"ok {config.config_hash} arch={config.arch_name} variant={config.scheduler.variant} "
          f"lp={config.topology.num_lp} hp={config.topology.num_hp} kv_blocks={config.topology.kv_blocks}")
    return 0


def _cmd_presets(args) -> int:
    if args.reference:
        print(reference_page())
        return 0
    print("architectures:")
    for name, p in PRESETS.items():
        a = p.arch
        print(f"  {name}: h={a.hidden_size} heads={a.num_heads}/{a.num_kv_heads} s={a.head_size} "
              f"ffn={a.ffn_size} layers={a.num_layers} params={p.num_params:.3g}")
    print("datasets:")
    for name in DATASET_PRESETS:
        print(f"  {name}")
    print("slo presets (ttft s, tbt s):")
    for key, (ttft, tbt) in SLO_PRESETS.items():
        print(f"  {key[0]}/{key[1]}: {ttft}, {tbt}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment file (defaults apply when omitted)")
    p.add_argument("--duration", type=float, help="simulated seconds of arrivals")
    p.add_argument("--scheduler", choices=("tiered", "vllm", "sarathi"))
    p.add_argument("--policy", choices=("edf", "sjf", "fcfs", "ljf"))
    p.add_argument("--drop", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--elastic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--tickets", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tierserve", description="LP/HP serving scheduler simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation")
    _add_common(p)
    p.add_argument("--qps", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--slo-scale", type=float)
    p.add_argument("--out", help="directory for results.csv, outcomes.csv and events.csv")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="sweep QPS and/or SLO scale over seeds")
    _add_common(p)
    p.add_argument("--qps", type=_csv_list(float), help="e.g. 1,1.5,2")
    p.add_argument("--seed", type=_csv_list(int), help="e.g. 0,1,2")
    p.add_argument("--slo-scale", type=_csv_list(float), help="goodput recomputed per scale on each run")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("fit-model", help="fit latency coefficients from a batch-record CSV")
    p.add_argument("records")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--flops-cap", type=float, help="flops/s (default 312e12)")
    p.add_argument("--mem-bw", type=float, help="bytes/s (default 2e12)")
    p.add_argument("--holdout", type=float, default=0.2, help="fraction held out for the error report")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("validate-config", help="parse and check a config")
    _add_common(p)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("presets", help="list built-in presets")
    p.add_argument("--reference", action="store_true", help="print every config key with its default")
    p.set_defaults(func=_cmd_presets)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, InsufficientDataError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # malformed input files carry line numbers
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
