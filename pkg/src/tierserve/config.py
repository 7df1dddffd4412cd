"""Experiment configuration: TOML sections -> validated ``SimConfig``.

Sections and keys (defaults in ``DEFAULTS``)::

    [arch]       preset, or explicit shape fields; tp_degree, num_params
    [latency]    coeffs, flops_cap, mem_bw, model_file
    [topology]   lp, hp, block_size, gpu_mem_gb, mem_util, kv_blocks,
                 lp_max_batch, hp_max_batch, baseline_max_batch
    [slo]        preset (dataset name), model, ttft, tbt, scale
    [scheduler]  variant, policy, budgets, offload/drop/elastic/tickets flags
    [workload]   dataset | trace | prompt+output dists, qps, duration, seed,
                 max_prompt_len
    [engine]     warmup, log_events, strict_invariants, record_batches

Unknown sections or keys are errors.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .arch import PRESETS, ConfigError, ModelArch, get_preset, kv_capacity_blocks
from .latency import A100_FLOPS, A100_MEM_BW, DEFAULT_COEFFS, LatencyModel, load_model
from .scheduler import ValuePolicy
from .workload import DATASET_PRESETS, SLO_PRESETS, LengthDist, SloSpec, slo_preset

VARIANTS = ("tiered", "vllm", "sarathi")

DEFAULTS: dict[str, dict[str, Any]] = {
    "arch": {
        "preset": "mistral-7b",
        "hidden_size": None, "num_heads": None, "head_size": None, "num_kv_heads": None,
        "ffn_size": None, "num_layers": None, "attn_block_size": 128, "dtype_bytes": 2,
        "tp_degree": 1, "num_params": None,
    },
    "latency": {
        "coeffs": list(DEFAULT_COEFFS), "flops_cap": A100_FLOPS, "mem_bw": A100_MEM_BW, "model_file": None,
    },
    "topology": {
        "lp": 2, "hp": 1, "block_size": 16, "gpu_mem_gb": 80.0, "mem_util": 0.9, "kv_blocks": None,
        "lp_max_batch": 128, "hp_max_batch": 256, "baseline_max_batch": 256,
    },
    "slo": {"preset": "sharegpt", "model": None, "ttft": None, "tbt": None, "scale": 1.0},
    "scheduler": {
        "variant": "tiered", "policy": "edf",
        "lp_token_budget": 8192, "hp_token_budget": 4096, "baseline_token_budget": 4096, "chunk_budget": 512,
        "offload": True, "offload_margin": 0.0, "drop": False, "elastic": True, "tickets": True,
        "decode_reserve_tokens": 1, "transfer_delay": 0.0, "default_decode_len": 256,
    },
    "workload": {
        "dataset": "sharegpt", "trace": None, "prompt": None, "output": None,
        "qps": 2.0, "duration": 300.0, "seed": 0, "max_prompt_len": None,
    },
    "engine": {"warmup": 30.0, "log_events": False, "strict_invariants": False, "record_batches": False},
}


def load_toml(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return tomllib.load(fh)


@dataclass(frozen=True)
class Topology:
    num_lp: int
    num_hp: int
    block_size: int
    kv_blocks: int
    lp_max_batch: int
    hp_max_batch: int
    baseline_max_batch: int


@dataclass(frozen=True)
class SchedulerConfig:
    variant: str
    policy: ValuePolicy
    lp_token_budget: int
    hp_token_budget: int
    baseline_token_budget: int
    chunk_budget: int
    offload: bool
    offload_margin: float
    drop: bool
    elastic: bool
    tickets: bool
    decode_reserve_tokens: int
    transfer_delay: float
    default_decode_len: int


@dataclass(frozen=True)
class WorkloadConfig:
    dataset: str | None
    trace: str | None
    dists: dict | None
    qps: float
    duration: float
    seed: int
    max_prompt_len: int | None


@dataclass(frozen=True)
class EngineConfig:
    warmup: float
    log_events: bool
    strict_invariants: bool
    record_batches: bool


@dataclass(frozen=True)
class SimConfig:
    arch: ModelArch
    arch_name: str
    latency: LatencyModel
    topology: Topology
    slo: SloSpec
    scheduler: SchedulerConfig
    workload: WorkloadConfig
    engine: EngineConfig
    raw: Mapping[str, Any] = dataclasses.field(default_factory=dict, compare=False, repr=False)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "SimConfig":
        return build_config(self.raw, overrides, base_dir=None)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(resolved_dict(self.raw), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _merge(raw: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
    merged = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in merged:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, Mapping):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in merged[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            merged[section][key] = value
    return merged


def resolved_dict(raw: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
    return _merge(raw)


def apply_overrides(raw: Mapping[str, Any], overrides: Mapping[str, Any] | None) -> dict:
    out = copy.deepcopy(dict(raw))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must be section.key")
        out.setdefault(section, {})[key] = value
    return out


def _num(section, key, value, kind=float, positive=True, allow_zero=False):
    try:
        if isinstance(value, bool):
            raise TypeError
        v = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key} must be a {kind.__name__}, got {value!r}") from None
    if kind is int and v != value:
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    if positive and not (v > 0 or (allow_zero and v == 0)):
        raise ConfigError(f"{section}.{key} must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")
    if kind is float and not math.isfinite(v) and key != "offload_margin":
        raise ConfigError(f"{section}.{key} must be finite")
    return v


def _bool(section, key, value):
    if not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")
    return value


def build_config(raw: Mapping[str, Any], overrides: Mapping[str, Any] | None = None,
                 base_dir: Path | None = None) -> SimConfig:
    raw = apply_overrides(raw, overrides)
    cfg = _merge(raw)

    a = cfg["arch"]
    shape_keys = ("hidden_size", "num_heads", "head_size", "num_kv_heads", "ffn_size", "num_layers")
    explicit = {k: a[k] for k in shape_keys if a[k] is not None}
    if explicit:
        missing = [k for k in shape_keys if a[k] is None]
        if missing:
            raise ConfigError(f"explicit arch is missing {', '.join('arch.' + k for k in missing)}")
        if a["num_params"] is None:
            raise ConfigError("explicit arch needs arch.num_params to size the KV cache")
        arch_name = a["preset"] if "preset" in raw.get("arch", {}) else "custom"
        num_params = _num("arch", "num_params", a["num_params"])
        arch = ModelArch(**explicit, attn_block_size=a["attn_block_size"], dtype_bytes=a["dtype_bytes"],
                         tp_degree=a["tp_degree"])
    else:
        preset = get_preset(a["preset"])
        arch_name = a["preset"].lower()
        arch = dataclasses.replace(preset.arch, attn_block_size=a["attn_block_size"],
                                   dtype_bytes=a["dtype_bytes"], tp_degree=a["tp_degree"])
        num_params = preset.num_params if a["num_params"] is None else _num("arch", "num_params", a["num_params"])

    lat = cfg["latency"]
    if lat["model_file"]:
        path = Path(lat["model_file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        latency = load_model(path)
    else:
        coeffs = lat["coeffs"]
        if not isinstance(coeffs, (list, tuple)) or len(coeffs) != 5:
            raise ConfigError("latency.coeffs must be a list of 5 numbers")
        latency = LatencyModel(tuple(_num("latency", "coeffs", c, positive=False) for c in coeffs),
                               _num("latency", "flops_cap", lat["flops_cap"]),
                               _num("latency", "mem_bw", lat["mem_bw"]))

    t = cfg["topology"]
    num_lp = _num("topology", "lp", t["lp"], int, allow_zero=True)
    num_hp = _num("topology", "hp", t["hp"], int, allow_zero=True)
    if num_lp + num_hp < 1:
        raise ConfigError("topology needs at least one instance")
    block_size = _num("topology", "block_size", t["block_size"], int)
    if t["kv_blocks"] is not None:
        kv_blocks = _num("topology", "kv_blocks", t["kv_blocks"], int)
    else:
        kv_blocks = kv_capacity_blocks(arch, _num("topology", "gpu_mem_gb", t["gpu_mem_gb"]) * 1e9,
                                       num_params * arch.dtype_bytes, block_size,
                                       _num("topology", "mem_util", t["mem_util"]))
    topology = Topology(num_lp, num_hp, block_size, kv_blocks,
                        _num("topology", "lp_max_batch", t["lp_max_batch"], int),
                        _num("topology", "hp_max_batch", t["hp_max_batch"], int),
                        _num("topology", "baseline_max_batch", t["baseline_max_batch"], int))

    s = cfg["slo"]
    scale = _num("slo", "scale", s["scale"])
    if s["ttft"] is not None or s["tbt"] is not None:
        if s["ttft"] is None or s["tbt"] is None:
            raise ConfigError("slo.ttft and slo.tbt must be given together")
        slo = SloSpec(_num("slo", "ttft", s["ttft"]), _num("slo", "tbt", s["tbt"]), scale)
    else:
        slo = slo_preset(s["model"] or arch_name, s["preset"], scale)

    sc = cfg["scheduler"]
    variant = str(sc["variant"]).lower()
    if variant not in VARIANTS:
        raise ConfigError(f"scheduler.variant must be one of {VARIANTS}, got {sc['variant']!r}")
    try:
        policy = ValuePolicy.named(str(sc["policy"]))
    except ValueError as exc:
        raise ConfigError(f"scheduler.policy: {exc}") from None
    offload = _bool("scheduler", "offload", sc["offload"])
    if variant == "tiered":
        if num_lp < 1:
            raise ConfigError("tiered topology needs at least one LP instance")
        if offload and num_hp < 1:
            raise ConfigError("offloading needs an HP instance; set scheduler.offload = false for LP-only runs")
    sched = SchedulerConfig(
        variant, policy,
        _num("scheduler", "lp_token_budget", sc["lp_token_budget"], int),
        _num("scheduler", "hp_token_budget", sc["hp_token_budget"], int),
        _num("scheduler", "baseline_token_budget", sc["baseline_token_budget"], int),
        _num("scheduler", "chunk_budget", sc["chunk_budget"], int),
        offload,
        _num("scheduler", "offload_margin", sc["offload_margin"], positive=False),
        _bool("scheduler", "drop", sc["drop"]),
        _bool("scheduler", "elastic", sc["elastic"]),
        _bool("scheduler", "tickets", sc["tickets"]),
        _num("scheduler", "decode_reserve_tokens", sc["decode_reserve_tokens"], int),
        _num("scheduler", "transfer_delay", sc["transfer_delay"], allow_zero=True),
        _num("scheduler", "default_decode_len", sc["default_decode_len"], int),
    )

    w = cfg["workload"]
    dists = None
    trace = w["trace"]
    dataset = w["dataset"]
    if w["prompt"] is not None or w["output"] is not None:
        if w["prompt"] is None or w["output"] is None:
            raise ConfigError("workload.prompt and workload.output must be given together")
        dists = {"prompt": dict(w["prompt"]), "output": dict(w["output"])}
        LengthDist.from_dict(dists["prompt"])
        LengthDist.from_dict(dists["output"])
        dataset = None
    elif trace:
        tp = Path(trace)
        if base_dir is not None and not tp.is_absolute():
            tp = base_dir / tp
        trace = str(tp)
        dataset = None
    elif str(dataset).lower() not in DATASET_PRESETS:
        raise ConfigError(f"unknown workload.dataset {dataset!r}; known: {sorted(DATASET_PRESETS)}")
    max_prompt = w["max_prompt_len"]
    workload = WorkloadConfig(
        dataset.lower() if dataset else None, trace, dists,
        _num("workload", "qps", w["qps"], allow_zero=True),
        _num("workload", "duration", w["duration"], allow_zero=True),
        _num("workload", "seed", w["seed"], int, positive=False),
        None if max_prompt is None else _num("workload", "max_prompt_len", max_prompt, int),
    )

    e = cfg["engine"]
    engine = EngineConfig(
        _num("engine", "warmup", e["warmup"], allow_zero=True),
        _bool("engine", "log_events", e["log_events"]),
        _bool("engine", "strict_invariants", e["strict_invariants"]),
        _bool("engine", "record_batches", e["record_batches"]),
    )
    return SimConfig(arch, arch_name, latency, topology, slo, sched, workload, engine, raw)


def parse_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> SimConfig:
    path = Path(path)
    return build_config(load_toml(path), overrides, base_dir=path.parent)


def reference_page() -> str:
    """Markdown listing of every config key and its default."""
    lines = ["# Configuration reference", ""]
    for section, keys in DEFAULTS.items():
        lines.append(f"## [{section}]")
        lines.append("")
        for k, v in keys.items():
            lines.append(f"- `{k}` = `{v!r}`")
        lines.append("")
    lines.append("Arch presets: " + ", ".join(sorted(PRESETS)))
    lines.append("")
    lines.append("Dataset presets: " + ", ".join(sorted(DATASET_PRESETS)))
    lines.append("")
    lines.append("SLO presets (model, dataset -> ttft, tbt):")
    for (m, d), (ttft, tbt) in sorted(SLO_PRESETS.items()):
        lines.append(f"- {m} / {d}: {ttft} s, {tbt} s")
    return "\n".join(lines) + "\n"
