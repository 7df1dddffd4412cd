"""Analytical FLOPs and memory-traffic accounting for transformer batches.

All counts are per forward pass over the whole model (per-layer terms times
``num_layers``). Memory terms are in bytes. Arithmetic is done on Python
integers so that algebraically equal batches produce identical numbers.

Decode attention traffic is an upper bound: every decode step is assumed to
reload the request's full K/V history from HBM.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence


class ConfigError(ValueError):
    """Raised for an invalid model, topology or simulation configuration."""


@dataclass(frozen=True)
class ModelArch:
    hidden_size: int
    num_heads: int
    head_size: int
    num_kv_heads: int
    ffn_size: int
    num_layers: int
    attn_block_size: int = 128
    dtype_bytes: int = 2
    tp_degree: int = 1

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.hidden_size != self.num_heads * self.head_size:
            raise ConfigError(
                f"hidden_size {self.hidden_size} != num_heads*head_size "
                f"{self.num_heads}*{self.head_size}"
            )
        if self.num_heads % self.num_kv_heads:
            raise ConfigError(
                f"num_kv_heads {self.num_kv_heads} does not divide num_heads {self.num_heads}"
            )


@dataclass(frozen=True)
class PrefillChunk:
    processed: int  # prompt tokens already in the KV cache
    chunk: int  # tokens computed in this batch
    prompt: int  # full prompt length


@dataclass(frozen=True)
class BatchComposition:
    prefill_chunks: tuple[PrefillChunk, ...] = ()
    decode_contexts: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "prefill_chunks", tuple(self.prefill_chunks))
        object.__setattr__(self, "decode_contexts", tuple(self.decode_contexts))
        for c in self.prefill_chunks:
            if c.processed < 0 or c.chunk < 1 or c.processed + c.chunk > c.prompt:
                raise ValueError(f"invalid prefill chunk {c}")
        for ctx in self.decode_contexts:
            if ctx < 1:
                raise ValueError(f"decode context must be >= 1, got {ctx}")

    @property
    def num_prefill(self) -> int:
        return len(self.prefill_chunks)

    @property
    def num_decode(self) -> int:
        return len(self.decode_contexts)

    @property
    def prefill_tokens(self) -> int:
        return sum(c.chunk for c in self.prefill_chunks)

    @property
    def is_empty(self) -> bool:
        return not self.prefill_chunks and not self.decode_contexts

    @classmethod
    def from_prompts(cls, prompt_lens: Sequence[int]) -> "BatchComposition":
        return cls(prefill_chunks=tuple(PrefillChunk(0, p, p) for p in prompt_lens))


@dataclass(frozen=True)
class CostBreakdown:
    gemm_flops: int = 0
    attn_flops: int = 0
    gemm_mem: int = 0
    attn_mem: int = 0

    @property
    def flops(self):
        return self.gemm_flops + self.attn_flops

    @property
    def mem_bytes(self):
        return self.gemm_mem + self.attn_mem

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(
            self.gemm_flops + other.gemm_flops,
            self.attn_flops + other.attn_flops,
            self.gemm_mem + other.gemm_mem,
            self.attn_mem + other.attn_mem,
        )


def apply_tensor_parallel(arch: ModelArch) -> ModelArch:
    """Per-GPU shard shape: h, n, n_kv and m divided by the TP degree."""
    tp = arch.tp_degree
    if tp == 1:
        return arch
    for name in ("num_heads", "num_kv_heads", "ffn_size"):
        if getattr(arch, name) % tp:
            raise ConfigError(f"tp_degree {tp} does not divide {name}={getattr(arch, name)}")
    if arch.hidden_size % (tp * arch.head_size):
        raise ConfigError(f"tp_degree*head_size does not divide hidden_size={arch.hidden_size}")
    return dataclasses.replace(
        arch,
        hidden_size=arch.hidden_size // tp,
        num_heads=arch.num_heads // tp,
        num_kv_heads=arch.num_kv_heads // tp,
        ffn_size=arch.ffn_size // tp,
        tp_degree=1,
    )


def kv_bytes_per_token(arch: ModelArch) -> int:
    return 2 * arch.num_kv_heads * arch.head_size * arch.num_layers * arch.dtype_bytes


def _gemm(arch: ModelArch, tokens: int) -> tuple[int, int]:
    # QKV, attention output, FFN in/out; weights are read once per batch.
    h, m = arch.hidden_size, arch.ffn_size
    flops = 4 * tokens * h * h + 2 * tokens * h * m
    mem = (8 * tokens * h + 4 * h * h + 2 * h * m + 2 * tokens * m) * arch.dtype_bytes
    return flops, mem


def _chunk_attention(arch: ModelArch, processed: int, chunk: int) -> tuple[int, int]:
    n, s, b = arch.num_heads, arch.head_size, arch.attn_block_size
    if processed == 0:
        # first chunk: self-attention over its own tokens, same as an un-chunked prompt
        flops = 2 * chunk * chunk * s
        mem = 2 * chunk * s + 3 * chunk * s * -(-chunk // b)
    else:
        flops = 2 * s * processed * chunk
        mem = 2 * processed * s + 3 * chunk * s * -(-processed // b)
    return n * flops, n * mem * arch.dtype_bytes


def _decode_attention(arch: ModelArch, contexts: Sequence[int]) -> tuple[int, int]:
    n, s = arch.num_heads, arch.head_size
    total = sum(contexts)
    flops = n * 2 * total * s
    mem = n * (2 * total * s + 2 * s * len(contexts)) * arch.dtype_bytes
    return flops, mem


def _scaled(arch: ModelArch, gf: int, af: int, gm: int, am: int) -> CostBreakdown:
    L = arch.num_layers
    return CostBreakdown(gf * L, af * L, gm * L, am * L)


def prefill_cost(arch: ModelArch, prompt_lens: Sequence[int]) -> CostBreakdown:
    """Cost of a prefill-only batch of whole (un-chunked) prompts."""
    if not prompt_lens:
        raise ValueError("prefill_cost needs at least one prompt; use decode_cost for decode-only batches")
    if any(p < 1 for p in prompt_lens):
        raise ValueError("prompt lengths must be >= 1")
    gf, gm = _gemm(arch, sum(prompt_lens))
    af = am = 0
    for p in prompt_lens:
        f, mm = _chunk_attention(arch, 0, p)
        af += f
        am += mm
    return _scaled(arch, gf, af, gm, am)


def decode_cost(arch: ModelArch, context_lens: Sequence[int]) -> CostBreakdown:
    """Cost of one decode step for every request in ``context_lens``.

    ``context_lens`` counts prompt plus generated tokens so far. Attention
    traffic is the upper bound where each request reloads its whole KV.
    """
    if not context_lens:
        raise ValueError("decode_cost needs at least one context")
    if any(c < 1 for c in context_lens):
        raise ValueError("context lengths must be >= 1")
    gf, gm = _gemm(arch, len(context_lens))
    af, am = _decode_attention(arch, context_lens)
    return _scaled(arch, gf, af, gm, am)


def hybrid_cost(arch: ModelArch, batch: BatchComposition) -> CostBreakdown:
    """Cost of a mixed batch of prefill chunks and decode steps.

    GEMM work is linear in the number of tokens, so both sides share one GEMM
    pass over ``sum(chunk) + num_decode`` tokens and the weights are read once.
    """
    if batch.is_empty:
        raise ValueError("empty batch has no cost")
    gf, gm = _gemm(arch, batch.prefill_tokens + batch.num_decode)
    af = am = 0
    for c in batch.prefill_chunks:
        f, mm = _chunk_attention(arch, c.processed, c.chunk)
        af += f
        am += mm
    if batch.decode_contexts:
        f, mm = _decode_attention(arch, batch.decode_contexts)
        af += f
        am += mm
    return _scaled(arch, gf, af, gm, am)


def chunking_attention_gap(arch: ModelArch, chunks: Sequence[int]) -> int:
    """Attention FLOPs an un-chunked prefill counts beyond the chunked sum.

    For chunks c_1..c_k of one prompt with l_j tokens processed before chunk j,
    the gap is ``2*s*n*L * sum_{j>=2} c_j*(l_j + c_j)``: later chunks are
    charged only against earlier tokens, not against themselves.
    """
    gap = 0
    done = 0
    for j, c in enumerate(chunks):
        if j:
            gap += c * (done + c)
        done += c
    return 2 * arch.head_size * arch.num_heads * arch.num_layers * gap


def kv_capacity_blocks(
    arch: ModelArch,
    gpu_mem_bytes: float,
    weight_bytes: float,
    block_size_tokens: int,
    mem_util: float = 0.9,
) -> int:
    """KV blocks that fit in one instance after weights (per GPU shard)."""
    free = gpu_mem_bytes * mem_util - weight_bytes / arch.tp_degree
    per_block = kv_bytes_per_token(apply_tensor_parallel(arch)) * block_size_tokens
    blocks = math.floor(free / per_block)
    if blocks <= 0:
        raise ConfigError("model weights leave no room for KV cache")
    return blocks


@dataclass(frozen=True)
class ArchPreset:
    arch: ModelArch
    num_params: float
    extra: dict = field(default_factory=dict)

    @property
    def weight_bytes(self) -> float:
        return self.num_params * self.arch.dtype_bytes


PRESETS: dict[str, ArchPreset] = {
    "mistral-7b": ArchPreset(
        ModelArch(hidden_size=4096, num_heads=32, head_size=128, num_kv_heads=8,
                  ffn_size=14336, num_layers=32),
        num_params=7.24e9,
    ),
    "llama3.1-8b": ArchPreset(
        ModelArch(hidden_size=4096, num_heads=32, head_size=128, num_kv_heads=8,
                  ffn_size=14336, num_layers=32),
        num_params=8.03e9,
    ),
    "qwen-14b": ArchPreset(
        ModelArch(hidden_size=5120, num_heads=40, head_size=128, num_kv_heads=40,
                  ffn_size=13696, num_layers=40),
        num_params=14.2e9,
    ),
}


def get_preset(name: str) -> ArchPreset:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown arch preset {name!r}; known: {sorted(PRESETS)}") from None
