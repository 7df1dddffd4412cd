"""Discrete-event engine at batch granularity.

Every instance runs one batch at a time. A batch's requests all advance
together when the batch completes; the batch's duration is the latency
model's prediction for its composition.
"""

from __future__ import annotations

import csv
import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .arch import apply_tensor_parallel
from .config import SimConfig
from .controller import RoutingState, dispatch_offloads, issue_ticket, route_arrival
from .latency import ObservedBatchRecord
from .scheduler import (
    BatchPlan,
    InstanceState,
    Predictor,
    Role,
    drop_expired,
    flag_offloads,
    form_batch_hp,
    form_batch_lp,
    form_batch_sarathi_like,
    form_batch_vllm_like,
)
from .workload import (
    DATASET_PRESETS,
    Request,
    State,
    build_requests,
    load_trace,
    poisson_arrivals,
    synth_trace,
)

logger = logging.getLogger(__name__)

ARRIVAL, OFFLOAD_ARRIVE, BATCH_COMPLETE, END_OF_RUN = 0, 1, 2, 3
EVENT_NAMES = {ARRIVAL: "arrival", OFFLOAD_ARRIVE: "offload_arrive", BATCH_COMPLETE: "batch_complete",
               END_OF_RUN: "end_of_run"}
MIN_BATCH_TIME = 1e-9


class InvariantViolation(AssertionError):
    pass


@dataclass
class SimResult:
    config: SimConfig
    requests: list[Request]
    instances: list[InstanceState]
    events: list[tuple] = field(default_factory=list)
    batch_records: list[ObservedBatchRecord] = field(default_factory=list)
    end_time: float = 0.0
    num_batches: int = 0
    invariant_checks: int = 0


def generate_requests(config: SimConfig) -> list[Request]:
    w = config.workload
    arrivals = poisson_arrivals(w.qps, w.duration, w.seed)
    trace_seed = w.seed + 1_000_003
    if w.trace:
        entries = load_trace(w.trace)
    else:
        spec = w.dists if w.dists is not None else DATASET_PRESETS[w.dataset]
        entries = synth_trace(spec, len(arrivals), trace_seed)
    reqs = build_requests(entries, arrivals, config.slo, seed=trace_seed)
    if w.max_prompt_len is not None:
        for r in reqs:
            if r.prompt_len > w.max_prompt_len:
                r.prompt_len = r.effective_prompt_len = w.max_prompt_len
    return reqs


class Simulation:
    def __init__(self, config: SimConfig, requests: list[Request] | None = None):
        self.config = config
        sc = config.scheduler
        topo = config.topology
        self.arch = apply_tensor_parallel(config.arch)
        self.predictor = Predictor(self.arch, config.latency, topo.block_size, sc.decode_reserve_tokens)
        self.truth = config.latency
        self.requests = generate_requests(config) if requests is None else requests
        self.variant = sc.variant
        self.instances: list[InstanceState] = []
        n_total = topo.num_lp + topo.num_hp
        if self.variant == "tiered":
            for i in range(topo.num_lp):
                self.instances.append(InstanceState(
                    i, Role.LP, topo.kv_blocks, topo.block_size, topo.lp_max_batch, sc.lp_token_budget))
            for i in range(topo.num_lp, n_total):
                self.instances.append(InstanceState(
                    i, Role.HP, topo.kv_blocks, topo.block_size, topo.hp_max_batch, sc.hp_token_budget,
                    elastic=sc.elastic, default_decode_len=sc.default_decode_len))
        else:
            budget = sc.chunk_budget if self.variant == "sarathi" else sc.baseline_token_budget
            for i in range(n_total):
                self.instances.append(InstanceState(
                    i, Role.LP, topo.kv_blocks, topo.block_size, topo.baseline_max_batch, budget))
        lp_ids = [i.id for i in self.instances if i.role is Role.LP]
        hp_ids = [i.id for i in self.instances if i.role is Role.HP]
        self.routing = RoutingState(lp_ids, hp_ids)
        self.offload_enabled = self.variant == "tiered" and sc.offload and bool(hp_ids)
        self.tickets_enabled = self.variant == "tiered" and sc.tickets
        self._heap: list[tuple] = []
        self._seq = 0
        self.now = 0.0
        self.arrived = self.completed = self.dropped = self.in_transfer = 0
        self.events: list[tuple] = []
        self.batch_records: list[ObservedBatchRecord] = []
        self.num_batches = 0
        self.checks = 0
        self._log = config.engine.log_events
        self._plans: dict[int, BatchPlan] = {}
        self._former: Callable[[InstanceState, float], BatchPlan] = {
            "tiered": self._form_tiered,
            "vllm": lambda inst, now: form_batch_vllm_like(inst, now, self.predictor),
            "sarathi": lambda inst, now: form_batch_sarathi_like(inst, now, self.predictor),
        }[self.variant]

    # -------------------------------------------------------------- plumbing
    def _push(self, time: float, kind: int, payload=None, target: int | None = None) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, payload, target))
        self._seq += 1

    def _record(self, inst: int | None, kind: str, rid: int | None = None, detail: str = "") -> None:
        if self._log:
            self.events.append((self.now, inst, kind, rid, detail))

    def _form_tiered(self, inst: InstanceState, now: float) -> BatchPlan:
        sc = self.config.scheduler
        if inst.role is Role.HP:
            return form_batch_hp(inst, now, self.predictor)
        return form_batch_lp(inst, now, sc.policy, self.predictor, self.config.slo.tbt)

    # -------------------------------------------------------------- run
    def run(self) -> SimResult:
        for r in self.requests:
            self._push(r.arrival_time, ARRIVAL, r)
        self._push(self.config.workload.duration, END_OF_RUN)
        if self.tickets_enabled:
            for inst in self.instances:
                if inst.role is Role.HP and issue_ticket(self.routing, inst):
                    self._record(inst.id, "ticket")
        while self._heap:
            time, _, kind, payload, target = heapq.heappop(self._heap)
            if time < self.now:
                raise InvariantViolation(f"time went backwards: {time} < {self.now}")
            self.now = time
            if kind == ARRIVAL:
                self._on_arrival(payload)
            elif kind == OFFLOAD_ARRIVE:
                self._on_offload_arrive(payload, self.instances[target])
            elif kind == BATCH_COMPLETE:
                self._on_batch_complete(self.instances[target])
            else:
                self._record(None, "end_of_run")
            self.check_invariants()
        self._check_drained()
        return SimResult(self.config, self.requests, self.instances, self.events, self.batch_records,
                         self.now, self.num_batches, self.checks)

    def _on_arrival(self, r: Request) -> None:
        self.arrived += 1
        target, via_ticket = route_arrival(self.routing, r)
        inst = self.instances[target]
        r.home_instance = target
        if via_ticket:
            r.ticketed = True
            inst.ticket_outstanding = False
            inst.ticketed_live += 1
        if self._log:
            detail = (f"prompt={r.prompt_len};output={r.output_len};ttft_slo={r.ttft_slo!r};tbt_slo={r.tbt_slo!r}"
                      + (";ticket" if via_ticket else ""))
            self._record(target, "arrival", r.id, detail)
        self._enqueue(inst, r)
        self.step_instance(inst)

    def _on_offload_arrive(self, r: Request, inst: InstanceState) -> None:
        self.in_transfer -= 1
        r.offloaded = True
        self._record(inst.id, "offload_arrive", r.id)
        self._enqueue(inst, r)
        self.step_instance(inst)

    def _enqueue(self, inst: InstanceState, r: Request) -> None:
        r.queue_enter_time = self.now
        if self.predictor.prefill_blocks(r) > inst.kv_blocks_total:
            # can never fit in this instance's KV cache
            r.transition(State.DROPPED)
            r.drop_time = self.now
            self._on_dropped(inst, r, "oversize")
            return
        inst.enqueue(r)

    def _on_dropped(self, inst: InstanceState, r: Request, why: str) -> None:
        self.dropped += 1
        if r.ticketed and inst.role is Role.HP:
            inst.ticketed_live -= 1
        if r.tokens_decoded:
            why += f";tokens={r.tokens_decoded};tbt_samples={r.tbt_samples}"
        self._record(inst.id, "drop", r.id, why)

    def step_instance(self, inst: InstanceState) -> None:
        """Form and launch the next batch on an idle instance; park it if there is no work."""
        if inst.busy:
            return
        now = self.now
        sc = self.config.scheduler
        if sc.drop:
            for r in drop_expired(inst, now):
                self._on_dropped(inst, r, "expired")
        while True:
            plan = self._former(inst, now)
            outgrown = 0
            for r in plan.preempted:
                self._record(inst.id, "preempt", r.id)
                if self.predictor.prefill_blocks(r) > inst.kv_blocks_total:
                    # prompt plus decoded tokens outgrew the whole cache; recompute can never fit
                    inst.waiting.remove(r)
                    r.transition(State.DROPPED)
                    r.drop_time = now
                    self._on_dropped(inst, r, "oversize")
                    outgrown += 1
            # a dropped request may have been blocking the queue head
            if not (outgrown and plan.is_empty):
                break
        if self._log:
            for r, _ in plan.prefill_selections:
                if r.tokens_prefilled == 0:
                    self._record(inst.id, "prefill_start", r.id)
        if self.offload_enabled and inst.role is Role.LP:
            moved = flag_offloads(inst, now, self.predictor, sc.hp_token_budget, sc.offload_margin)
            for r, hp, t in dispatch_offloads(self.routing, moved, now, sc.transfer_delay):
                inst.offload_outbox.remove(r)
                self.in_transfer += 1
                self._record(inst.id, "offload", r.id, f"hp={hp}")
                self._push(t, OFFLOAD_ARRIVE, r, hp)
        if plan.is_empty:
            if inst.waiting or inst.decoding:
                raise InvariantViolation(f"instance {inst.id} parked with pending work at t={now}")
            if inst.role is Role.HP:
                self._maybe_ticket(inst)
            return
        if self.truth is self.predictor.model:
            latency = plan.predicted_latency
            cost = None
        else:
            cost = self.predictor.cost(plan.composition)
            latency = self.truth.predict(cost)
        latency = max(latency, MIN_BATCH_TIME)
        inst.busy = True
        inst.busy_until = now + latency
        self._plans[inst.id] = plan
        self.num_batches += 1
        comp = plan.composition
        if self.config.engine.record_batches:
            cost = cost or self.predictor.cost(comp)
            self.batch_records.append(ObservedBatchRecord(
                cost.flops, cost.mem_bytes, latency, comp.num_prefill, comp.num_decode,
                comp.prefill_tokens, comp.num_decode))
        self._record(inst.id, "batch", None,
                     f"p={comp.num_prefill} pt={comp.prefill_tokens} d={comp.num_decode} lat={latency!r}")
        self._push(now + latency, BATCH_COMPLETE, None, inst.id)

    def _on_batch_complete(self, inst: InstanceState) -> None:
        now = self.now
        plan = self._plans.pop(inst.id)
        finished: list[Request] = []
        done_prefill = set()
        for r, c in plan.prefill_selections:
            r.tokens_prefilled += c
            if r.tokens_prefilled == r.effective_prompt_len:
                done_prefill.add(r.id)
                r.transition(State.DECODING)
                r.emit_token(now)
                if r.tokens_decoded >= r.output_len:
                    finished.append(r)
                else:
                    inst.add_decoding(r)
                self._record(inst.id, "prefill_done", r.id)
        if done_prefill:
            inst.prefilling = [r for r in inst.prefilling if r.id not in done_prefill]
            if self.variant == "sarathi":
                inst.waiting = [r for r in inst.waiting if r.id not in done_prefill]
        for r in plan.decode_selections:
            r.emit_token(now)
            if r.tokens_decoded >= r.output_len:
                finished.append(r)
        if finished:
            for r in finished:
                self._finish(inst, r)
            inst.decoding = [r for r in inst.decoding if r.state is State.DECODING]
        inst.busy = False
        if inst.role is Role.HP:
            self._maybe_ticket(inst)
        self.step_instance(inst)

    def _finish(self, inst: InstanceState, r: Request) -> None:
        r.transition(State.COMPLETED)
        r.completion_time = self.now
        inst.release(r)
        self.completed += 1
        if inst.role is Role.HP:
            inst.decode_len_history.append(r.tokens_decoded)
            if r.ticketed:
                inst.ticketed_live -= 1
        self._record(inst.id, "complete", r.id)

    def _maybe_ticket(self, inst: InstanceState) -> None:
        if self.tickets_enabled and issue_ticket(self.routing, inst):
            self._record(inst.id, "ticket")

    # -------------------------------------------------------------- checks
    def check_invariants(self) -> None:
        self.checks += 1
        live = self.in_transfer
        for inst in self.instances:
            if not 0 <= inst.kv_blocks_free <= inst.kv_blocks_total:
                raise InvariantViolation(f"instance {inst.id}: kv_blocks_free={inst.kv_blocks_free}")
            if sum(inst.held.values()) + inst.kv_blocks_free != inst.kv_blocks_total:
                raise InvariantViolation(f"instance {inst.id}: KV ledger does not balance")
            if (inst.waiting or inst.decoding) and not inst.busy:
                raise InvariantViolation(f"instance {inst.id} idle with pending work")
            live += inst.live_count
        if self.arrived != self.completed + self.dropped + live:
            raise InvariantViolation(
                f"conservation: arrived={self.arrived} completed={self.completed} "
                f"dropped={self.dropped} live={live}")
        if self.config.engine.strict_invariants:
            self._check_strict()

    def _check_strict(self) -> None:
        seen: set[int] = set()
        for inst in self.instances:
            members = inst.waiting + inst.decoding + inst.prefilling + inst.offload_outbox
            for r in members:
                if r.id in seen:
                    raise InvariantViolation(f"request {r.id} in two places")
                seen.add(r.id)
            for r in inst.decoding:
                if r.state is not State.DECODING or r.id not in inst.held:
                    raise InvariantViolation(f"decoding request {r.id} inconsistent")
            live_ids = {r.id for r in members}
            if not set(inst.held) <= live_ids:
                raise InvariantViolation(f"instance {inst.id} holds blocks for a finished request")
            for r in inst.offload_outbox + inst.waiting:
                if r in inst.offload_outbox and r.tokens_prefilled > 0:
                    raise InvariantViolation(f"request {r.id} offloaded after prefill started")
            if inst.waiting != sorted(inst.waiting, key=lambda x: (x.arrival_time, x.id)):
                raise InvariantViolation(f"instance {inst.id} waiting queue out of order")

    def _check_drained(self) -> None:
        for inst in self.instances:
            if inst.live_count or inst.held or inst.kv_blocks_free != inst.kv_blocks_total:
                raise InvariantViolation(f"instance {inst.id} not drained at end of run")
        if self.in_transfer:
            raise InvariantViolation("requests still in transfer at end of run")
        for r in self.requests:
            if r.state is State.COMPLETED:
                if r.tokens_decoded != r.output_len or r.tbt_samples != r.output_len - 1:
                    raise InvariantViolation(f"request {r.id} completed with wrong token counts")
                if not (r.arrival_time <= r.first_token_time <= r.completion_time):
                    raise InvariantViolation(f"request {r.id} timestamps out of order")
            elif r.state is not State.DROPPED:
                raise InvariantViolation(f"request {r.id} ended in state {r.state}")


def run(config: SimConfig, requests: list[Request] | None = None) -> SimResult:
    return Simulation(config, requests).run()


EVENT_LOG_COLUMNS = ("time", "instance", "event", "request_id", "detail")


def read_event_log(path: str | Path) -> list[tuple]:
    """Inverse of :func:`write_event_log`."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != EVENT_LOG_COLUMNS:
            raise ValueError(f"{path}: not an event log (header {header})")
        for t, inst, kind, rid, detail in reader:
            out.append((float(t), None if inst == "" else int(inst), kind, None if rid == "" else int(rid), detail))
    return out


def write_event_log(path: str | Path, events: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_LOG_COLUMNS)
        for t, inst, kind, rid, detail in events:
            w.writerow([repr(t), "" if inst is None else inst, kind, "" if rid is None else rid, detail])
