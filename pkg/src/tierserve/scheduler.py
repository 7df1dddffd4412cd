"""Per-instance batch formation.

LP instances piggyback prefills onto the running decodes, choosing prefills
out of arrival order by a value policy under compute, memory and token
budgets, and flag requests whose TTFT deadline is at risk for offloading.
HP instances run prefill first with an elastic token limit. Two baselines
(prefill-first FCFS and chunked-prefill FCFS) share the same interface.

Schedulers never read ``Request.output_len``.
"""

from __future__ import annotations

import enum
import heapq
from bisect import insort
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .arch import BatchComposition, CostBreakdown, ModelArch, PrefillChunk, decode_cost, hybrid_cost, prefill_cost
from .latency import LatencyModel, worst_case_batch_latency
from .workload import Request, State


class Role(enum.Enum):
    LP = "LP"
    HP = "HP"


class Policy(enum.Enum):
    EDF = "edf"
    SJF = "sjf"
    FCFS = "fcfs"
    LJF = "ljf"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ValuePolicy:
    kind: Policy = Policy.EDF
    # custom scoring rule: (request, now, predictor) -> score, higher runs first
    score: Callable[[Request, float, "Predictor"], float] | None = None

    @classmethod
    def named(cls, name: str) -> "ValuePolicy":
        try:
            kind = Policy(name.lower())
        except ValueError:
            raise ValueError(f"unknown policy {name!r}; choose edf, sjf, fcfs or ljf") from None
        if kind is Policy.CUSTOM:
            raise ValueError("custom policies need a scoring function")
        return cls(kind)


class Predictor:
    """Latency and memory estimates the schedulers plan with."""

    def __init__(self, arch: ModelArch, model: LatencyModel, block_size: int, decode_reserve_tokens: int = 1):
        self.arch = arch
        self.model = model
        self.block_size = block_size
        self.decode_reserve_tokens = decode_reserve_tokens
        self._prefill_cache: dict[int, float] = {}
        self._worst_cache: dict[int, float] = {}

    def prefill_latency(self, tokens: int) -> float:
        """Predicted latency of a batch holding only this one whole prompt."""
        t = self._prefill_cache.get(tokens)
        if t is None:
            t = self._prefill_cache[tokens] = self.model.predict(prefill_cost(self.arch, [tokens]))
        return t

    def worst_case(self, max_batch_tokens: int) -> float:
        t = self._worst_cache.get(max_batch_tokens)
        if t is None:
            t = self._worst_cache[max_batch_tokens] = worst_case_batch_latency(self.model, self.arch, max_batch_tokens)
        return t

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_size)

    def prefill_blocks(self, r: Request) -> int:
        return self.blocks_for(r.effective_prompt_len + self.decode_reserve_tokens)

    def cost(self, comp: BatchComposition) -> CostBreakdown:
        return hybrid_cost(self.arch, comp)

    def batch_latency(self, comp: BatchComposition) -> float:
        if comp.is_empty:
            return 0.0
        return self.model.predict(hybrid_cost(self.arch, comp))

    def decode_latency(self, contexts: Sequence[int]) -> float:
        if not contexts:
            return 0.0
        return self.model.predict(decode_cost(self.arch, contexts))


class CannotPreempt(RuntimeError):
    pass


@dataclass(eq=False)
class InstanceState:
    id: int
    role: Role
    kv_blocks_total: int
    block_size: int = 16
    max_batch_requests: int = 128
    token_budget: int = 8192
    elastic: bool = False
    default_decode_len: int = 256
    history_len: int = 1024
    waiting: list[Request] = field(default_factory=list)  # sorted by (arrival, id)
    decoding: list[Request] = field(default_factory=list)  # sorted by (arrival, id)
    prefilling: list[Request] = field(default_factory=list)  # whole-prompt prefills in flight
    offload_outbox: list[Request] = field(default_factory=list)
    ticket_outstanding: bool = False
    ticketed_live: int = 0
    decode_len_history: deque = field(default_factory=deque)
    held: dict[int, int] = field(default_factory=dict)  # request id -> KV blocks
    kv_blocks_free: int = -1
    busy: bool = False
    busy_until: float = 0.0

    def __post_init__(self):
        if self.kv_blocks_free < 0:
            self.kv_blocks_free = self.kv_blocks_total
        self.decode_len_history = deque(self.decode_len_history, maxlen=self.history_len)

    # KV ledger
    def allocate(self, r: Request, blocks: int) -> None:
        if blocks > self.kv_blocks_free:
            raise RuntimeError(f"instance {self.id}: KV over-allocation ({blocks} > {self.kv_blocks_free})")
        self.kv_blocks_free -= blocks
        self.held[r.id] = self.held.get(r.id, 0) + blocks

    def release(self, r: Request) -> int:
        blocks = self.held.pop(r.id, 0)
        self.kv_blocks_free += blocks
        return blocks

    def enqueue(self, r: Request) -> None:
        insort(self.waiting, r, key=_arrival_key)

    def add_decoding(self, r: Request) -> None:
        insort(self.decoding, r, key=_arrival_key)

    @property
    def live_count(self) -> int:
        return len(self.waiting) + len(self.decoding) + len(self.prefilling) + len(self.offload_outbox)

    @property
    def is_idle(self) -> bool:
        return not (self.waiting or self.decoding or self.prefilling)


def _arrival_key(r: Request):
    return (r.arrival_time, r.id)


@dataclass
class BatchPlan:
    prefill_selections: list[tuple[Request, int]] = field(default_factory=list)
    decode_selections: list[Request] = field(default_factory=list)
    composition: BatchComposition = field(default_factory=BatchComposition)
    predicted_latency: float = 0.0
    preempted: list[Request] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.prefill_selections and not self.decode_selections


def _finish_plan(plan: BatchPlan, predictor: Predictor) -> BatchPlan:
    chunks = tuple(PrefillChunk(r.tokens_prefilled, c, r.effective_prompt_len) for r, c in plan.prefill_selections)
    contexts = tuple(r.context_len for r in plan.decode_selections)
    plan.composition = BatchComposition(chunks, contexts)
    plan.predicted_latency = predictor.batch_latency(plan.composition)
    return plan


# ---------------------------------------------------------------- policies

def value_of(policy: ValuePolicy, r: Request, now: float, predictor: Predictor) -> float:
    """Priority score; higher is scheduled first."""
    kind = policy.kind
    if kind is Policy.EDF:
        return -(r.arrival_time + r.ttft_slo)
    if kind is Policy.FCFS:
        return -r.arrival_time
    if kind is Policy.SJF:
        return -predictor.prefill_latency(r.remaining_prefill)
    if kind is Policy.LJF:
        return predictor.prefill_latency(r.remaining_prefill)
    if policy.score is None:
        raise ValueError("custom policy has no scoring function")
    return policy.score(r, now, predictor)


def select_prefills(
    waiting: Sequence[Request],
    compute_budget: float,
    memory_budget: int,
    token_budget: int,
    policy: ValuePolicy,
    predictor: Predictor,
    now: float = 0.0,
    max_count: int | None = None,
) -> list[Request]:
    """Out-of-order selection: scan by value, take while every budget strictly covers
    the request's cost, and stop at the first request that does not fit."""
    # values up front; costs only for the items the scan actually reaches
    heap = [(-value_of(policy, r, now, predictor), r.id, r) for r in waiting]
    heapq.heapify(heap)
    C, M, N = compute_budget, memory_budget, token_budget
    selected: list[Request] = []
    while heap:
        if max_count is not None and len(selected) >= max_count:
            break
        if not (C > 0 and M > 0 and N > 0):
            break
        r = heapq.heappop(heap)[2]
        cost_c = predictor.prefill_latency(r.remaining_prefill)
        cost_m = predictor.prefill_blocks(r)
        tokens = r.remaining_prefill
        if C > cost_c and M > cost_m and N > tokens:
            selected.append(r)
            C -= cost_c
            M -= cost_m
            N -= tokens
        else:
            break
    return selected


# ---------------------------------------------------------------- memory

def preempt(inst: InstanceState) -> Request:
    """Evict the latest-arrived decoding request by recomputation."""
    if not inst.decoding:
        raise CannotPreempt(f"instance {inst.id} has no decoding request to evict")
    r = inst.decoding.pop()
    inst.release(r)
    r.effective_prompt_len = r.prompt_len + r.tokens_decoded
    r.tokens_prefilled = 0
    r.preemption_count += 1
    r.transition(State.QUEUED)
    inst.enqueue(r)
    return r


def _admit_decodes(inst: InstanceState, predictor: Predictor, plan: BatchPlan) -> list[Request]:
    """Grow KV for one decode step of the oldest decodes, preempting (LIFO) on shortfall."""
    while True:
        cands = inst.decoding[: inst.max_batch_requests]
        need = 0
        for r in cands:
            extra = predictor.blocks_for(r.context_len) - inst.held.get(r.id, 0)
            if extra > 0:
                need += extra
        if need <= inst.kv_blocks_free:
            break
        plan.preempted.append(preempt(inst))
    for r in cands:
        extra = predictor.blocks_for(r.context_len) - inst.held.get(r.id, 0)
        if extra > 0:
            inst.allocate(r, extra)
    return list(cands)


def _start_prefill(inst: InstanceState, r: Request, now: float, predictor: Predictor, in_flight: bool = True) -> None:
    inst.allocate(r, predictor.prefill_blocks(r))
    r.transition(State.PREFILLING)
    if r.prefill_start_time is None:
        r.prefill_start_time = now
        r.serving_instance = inst.id
    if r.instance_queue_delay is None:
        r.instance_queue_delay = now - r.queue_enter_time
    if in_flight:
        inst.waiting.remove(r)
        inst.prefilling.append(r)


def drop_expired(inst: InstanceState, now: float, enabled: bool = True) -> list[Request]:
    """Drop queued requests that are past their TTFT deadline and never produced a token."""
    if not enabled:
        return []
    dropped = [r for r in inst.waiting
               if r.state is State.QUEUED and r.first_token_time is None and now > r.deadline]
    for r in dropped:
        inst.waiting.remove(r)
        r.transition(State.DROPPED)
        r.drop_time = now
    return dropped


# ---------------------------------------------------------------- LP

def form_batch_lp(
    inst: InstanceState,
    now: float,
    policy: ValuePolicy,
    predictor: Predictor,
    tbt_slo: float,
) -> BatchPlan:
    plan = BatchPlan()
    decodes = _admit_decodes(inst, predictor, plan)
    plan.decode_selections = decodes
    compute = max(0.0, tbt_slo - predictor.decode_latency([r.context_len for r in decodes]))
    room = inst.max_batch_requests - len(decodes)
    queued = [r for r in inst.waiting if r.state is State.QUEUED]
    selected: list[Request] = []
    if room > 0 and queued:
        selected = select_prefills(queued, compute, inst.kv_blocks_free, inst.token_budget,
                                   policy, predictor, now, max_count=room)
        if not selected and not decodes:
            # an empty instance always makes progress: run the top request alone
            top = max(queued, key=lambda r: (value_of(policy, r, now, predictor), -r.id))
            if predictor.prefill_blocks(top) <= inst.kv_blocks_free:
                selected = [top]
    for r in selected:
        _start_prefill(inst, r, now, predictor)
        plan.prefill_selections.append((r, r.remaining_prefill))
    return _finish_plan(plan, predictor)


def offload_threshold(r: Request, predictor: Predictor, hp_token_budget: int, margin: float) -> float:
    return predictor.prefill_latency(r.remaining_prefill) + predictor.worst_case(hp_token_budget) + margin


def flag_offloads(
    inst: InstanceState,
    now: float,
    predictor: Predictor,
    hp_token_budget: int,
    margin: float = 0.0,
) -> list[Request]:
    """Move queued, never-prefilled requests whose slack no longer covers the
    worst-case HP path into the offload outbox."""
    moved = []
    for r in inst.waiting:
        if r.state is not State.QUEUED or r.prefill_start_time is not None:
            continue
        if r.deadline - now <= offload_threshold(r, predictor, hp_token_budget, margin):
            moved.append(r)
    for r in moved:
        inst.waiting.remove(r)
        inst.offload_outbox.append(r)
    return moved


# ---------------------------------------------------------------- HP

def elastic_limit(inst: InstanceState) -> int:
    """Prefill token limit: base budget, expanded by free KV beyond the decode reserve."""
    if not inst.elastic:
        return inst.token_budget
    hist = inst.decode_len_history
    mean_len = sum(hist) / len(hist) if hist else inst.default_decode_len
    reserve = mean_len * (len(inst.decoding) + 1)
    total_tokens = inst.kv_blocks_total * inst.block_size
    available = inst.kv_blocks_free * inst.block_size - reserve
    if available > 0.1 * total_tokens:
        return inst.token_budget + int(available)
    return inst.token_budget


def _fcfs_prefill(inst: InstanceState, now: float, predictor: Predictor, limit: int, room: int) -> list[Request]:
    selected = []
    tokens = 0
    free = inst.kv_blocks_free
    for r in inst.waiting:
        if len(selected) >= room:
            break
        need = predictor.prefill_blocks(r)
        if need > free:
            break
        if selected and tokens + r.remaining_prefill > limit:
            break
        selected.append(r)
        tokens += r.remaining_prefill
        free -= need
    return selected


def _prefill_or_decode(inst, now, predictor, limit, room) -> BatchPlan:
    plan = BatchPlan()
    if inst.waiting and room > 0:
        selected = _fcfs_prefill(inst, now, predictor, limit, room)
        if selected:
            for r in selected:
                _start_prefill(inst, r, now, predictor)
                plan.prefill_selections.append((r, r.remaining_prefill))
            return _finish_plan(plan, predictor)
    plan.decode_selections = _admit_decodes(inst, predictor, plan)
    return _finish_plan(plan, predictor)


def form_batch_hp(inst: InstanceState, now: float, predictor: Predictor) -> BatchPlan:
    """Prefill-first: whole prompts FCFS under the elastic limit, else one decode step."""
    return _prefill_or_decode(inst, now, predictor, elastic_limit(inst), inst.max_batch_requests)


# ---------------------------------------------------------------- baselines

def form_batch_vllm_like(inst: InstanceState, now: float, predictor: Predictor) -> BatchPlan:
    """Prefill-prioritising FCFS under a fixed token budget; decodes stall meanwhile."""
    room = inst.max_batch_requests - len(inst.decoding)
    return _prefill_or_decode(inst, now, predictor, inst.token_budget, room)


def form_batch_sarathi_like(inst: InstanceState, now: float, predictor: Predictor) -> BatchPlan:
    """All decodes plus FCFS prefill chunks filling the rest of the token budget."""
    plan = BatchPlan()
    decodes = _admit_decodes(inst, predictor, plan)
    plan.decode_selections = decodes
    budget = inst.token_budget - len(decodes)
    room = inst.max_batch_requests - len(decodes)
    for r in list(inst.waiting):
        if budget <= 0 or room <= 0:
            break
        if r.state is State.QUEUED:
            if predictor.prefill_blocks(r) > inst.kv_blocks_free:
                break
            _start_prefill(inst, r, now, predictor, in_flight=False)
        c = min(budget, r.remaining_prefill)
        plan.prefill_selections.append((r, c))
        budget -= c
        room -= 1
    return _finish_plan(plan, predictor)
