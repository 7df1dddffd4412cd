"""Request routing across LP and HP pools."""

from __future__ import annotations

from dataclasses import dataclass, field

from .arch import ConfigError
from .scheduler import InstanceState
from .workload import Request


@dataclass
class RoutingState:
    lp_instances: list[int]
    hp_instances: list[int] = field(default_factory=list)
    rr_cursor_lp: int = 0
    rr_cursor_hp: int = 0
    pending_tickets: set[int] = field(default_factory=set)

    def __post_init__(self):
        if not self.lp_instances:
            raise ConfigError("routing needs at least one LP instance")

    def add_ticket(self, hp_id: int) -> None:
        if hp_id in self.pending_tickets:
            raise ValueError(f"HP instance {hp_id} already holds an outstanding ticket")
        if hp_id not in self.hp_instances:
            raise ValueError(f"{hp_id} is not an HP instance")
        self.pending_tickets.add(hp_id)


def route_arrival(rs: RoutingState, request: Request) -> tuple[int, bool]:
    """Pick the instance for a fresh arrival. Returns ``(instance_id, via_ticket)``."""
    if rs.pending_tickets:
        hp = min(rs.pending_tickets)
        rs.pending_tickets.discard(hp)
        return hp, True
    target = rs.lp_instances[rs.rr_cursor_lp]
    rs.rr_cursor_lp = (rs.rr_cursor_lp + 1) % len(rs.lp_instances)
    return target, False


def issue_ticket(rs: RoutingState, hp: InstanceState) -> bool:
    """Grant one direct arrival to an HP instance with an empty waiting queue.

    At most one ticketed request is outstanding or live per HP instance; any
    unmet precondition makes this a silent no-op.
    """
    if hp.waiting or hp.ticket_outstanding or hp.ticketed_live or hp.id in rs.pending_tickets:
        return False
    rs.add_ticket(hp.id)
    hp.ticket_outstanding = True
    return True


def dispatch_offloads(
    rs: RoutingState, moved: list[Request], now: float, transfer_delay: float = 0.0
) -> list[tuple[Request, int, float]]:
    """Assign offloaded prompts round-robin over HP instances.

    Returns ``(request, hp_id, arrival_time_at_hp)`` per request.
    """
    if not moved:
        return []
    if not rs.hp_instances:
        raise ConfigError("offloading is enabled but there are no HP instances")
    out = []
    for r in moved:
        hp = rs.hp_instances[rs.rr_cursor_hp]
        rs.rr_cursor_hp = (rs.rr_cursor_hp + 1) % len(rs.hp_instances)
        out.append((r, hp, now + transfer_delay))
    return out
