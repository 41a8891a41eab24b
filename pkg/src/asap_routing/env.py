"""Vectorized routing environment.

A state holds ``B`` instances, each rolled out by ``traj`` parallel
trajectories (POMO). All per-trajectory tensors have shape ``(B, traj)``;
masks and urgencies ``(B, traj, N)``. Environment arithmetic is float64.

Rules in brief:

* step cost is the leg length; returning to the depot additionally costs
  ``penalty * load`` (load left unused on that tour);
* the depot is masked while ``step <= 2`` and while the vehicle stands on it,
  unless no customer is feasible, in which case it is the only choice;
* customers are infeasible when visited, heavier than the remaining load,
  or unreachable before their end-time on the fleet-wide clock
  ``fleet_distance / speed``;
* a trajectory is done when the last vehicle returns or when it stands at the
  depot with nothing left to serve. Done trajectories are frozen.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch

from .errors import ContractViolation
from .instance import Instance

DEFAULT_PENALTY = 10.0
LOAD_EPS = 1e-9
TIME_EPS = 1e-9
URGENCY_SENTINEL = float("inf")


@dataclass(frozen=True)
class InstanceBatch:
    coords: torch.Tensor      # (B, N, 2)
    demand: torch.Tensor      # (B, N)
    end_times: torch.Tensor   # (B, N)
    speed: torch.Tensor       # (B,)
    fleet_size: torch.Tensor  # (B,) long
    dist: torch.Tensor        # (B, N, N)

    @classmethod
    def from_instances(cls, instances: Sequence[Instance]) -> "InstanceBatch":
        if isinstance(instances, Instance):
            instances = [instances]
        sizes = {inst.num_nodes for inst in instances}
        if len(sizes) != 1:
            raise ValueError(f"all instances in a batch need the same node count, got {sorted(sizes)}")

        def stack(attr):
            return torch.stack([torch.tensor(getattr(i, attr), dtype=torch.float64)
                                for i in instances])

        return cls(coords=stack("coords"), demand=stack("demand"),
                   end_times=stack("end_times"),
                   speed=torch.tensor([i.speed for i in instances], dtype=torch.float64),
                   fleet_size=torch.tensor([i.fleet_size for i in instances], dtype=torch.long),
                   dist=stack("distance_matrix"))

    @property
    def batch_size(self) -> int:
        return self.coords.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[1]

    def with_rows(self, rows: torch.Tensor, other: "InstanceBatch") -> "InstanceBatch":
        fields = {}
        for name in ("coords", "demand", "end_times", "speed", "fleet_size", "dist"):
            t = getattr(self, name).clone()
            t[rows] = getattr(other, name)
            fields[name] = t
        return InstanceBatch(**fields)


@dataclass(frozen=True)
class EnvState:
    instances: InstanceBatch
    step: torch.Tensor               # (B, T) long
    current_node: torch.Tensor       # (B, T) long
    load: torch.Tensor               # (B, T) float64
    vehicles_remaining: torch.Tensor  # (B, T) long
    fleet_distance: torch.Tensor     # (B, T) float64
    mask: torch.Tensor               # (B, T, N) bool, True = not selectable
    done: torch.Tensor               # (B, T) bool
    visits: Optional[torch.Tensor] = None  # (B, T, L) long, -1 where frozen

    @property
    def batch_size(self) -> int:
        return self.step.shape[0]

    @property
    def num_traj(self) -> int:
        return self.step.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.mask.shape[2]

    def visit_order(self, b: int = 0, k: int = 0) -> list:
        if self.visits is None:
            raise ValueError("visit tracking is disabled for this state")
        return [int(a) for a in self.visits[b, k] if a >= 0]


@dataclass(frozen=True)
class StepOutcome:
    reward: torch.Tensor            # (B, T)
    done: torch.Tensor              # (B, T)
    returned_to_depot: torch.Tensor  # (B, T) bool
    load_at_return: torch.Tensor    # (B, T), 0 where no return happened

    @property
    def info(self) -> dict:
        return {"returned_to_depot": self.returned_to_depot,
                "load_at_return": self.load_at_return}


def _fresh_state(batch: InstanceBatch, num_traj: int, track_visits: bool) -> EnvState:
    B, N = batch.batch_size, batch.num_nodes
    mask = torch.zeros(B, num_traj, N, dtype=torch.bool)
    mask[:, :, 0] = True
    state = EnvState(
        instances=batch,
        step=torch.zeros(B, num_traj, dtype=torch.long),
        current_node=torch.zeros(B, num_traj, dtype=torch.long),
        load=torch.ones(B, num_traj, dtype=torch.float64),
        vehicles_remaining=batch.fleet_size[:, None].expand(B, num_traj).clone(),
        fleet_distance=torch.zeros(B, num_traj, dtype=torch.float64),
        mask=mask,
        done=torch.zeros(B, num_traj, dtype=torch.bool),
        visits=torch.zeros(B, num_traj, 0, dtype=torch.long) if track_visits else None,
    )
    # a customer that is unreachable from the very start leaves nothing to do
    nothing = ~_customer_feasible(state)[..., 1:].any(-1)
    if nothing.any():
        state = replace(state, done=nothing)
    return state


def reset(instances, num_traj: int, track_visits: bool = True) -> EnvState:
    """Place ``num_traj`` trajectories per instance at the depot."""
    batch = instances if isinstance(instances, InstanceBatch) else InstanceBatch.from_instances(instances)
    if not 1 <= num_traj <= batch.num_nodes - 1:
        raise ValueError(f"num_traj must lie in [1, {batch.num_nodes - 1}], got {num_traj}")
    return _fresh_state(batch, num_traj, track_visits)


def reset_rows(state: EnvState, rows, instances: Sequence[Instance]) -> EnvState:
    """Replace the instances of batch rows ``rows`` and reset those rows."""
    rows = torch.as_tensor(rows, dtype=torch.long)
    if rows.numel() == 0:
        return state
    new = InstanceBatch.from_instances(instances)
    fresh = _fresh_state(new, state.num_traj, track_visits=False)
    batch = state.instances.with_rows(rows, new)
    fields = {"instances": batch}
    for name in ("step", "current_node", "load", "vehicles_remaining", "fleet_distance", "mask", "done"):
        t = getattr(state, name).clone()
        t[rows] = getattr(fresh, name)
        fields[name] = t
    visits = state.visits
    if visits is not None:
        visits = visits.clone()
        visits[rows] = -1
    return replace(state, visits=visits, **fields)


def _gather_nodes(values: torch.Tensor, nodes: torch.Tensor) -> torch.Tensor:
    """values (B, N), nodes (B, T) -> (B, T)."""
    return torch.gather(values, 1, nodes)


def _dist_from_current(state: EnvState) -> torch.Tensor:
    dist = state.instances.dist  # (B, N, N)
    idx = state.current_node[..., None].expand(-1, -1, dist.shape[2])
    return torch.gather(dist, 1, idx)  # (B, T, N)


def compute_urgency(state: EnvState, instance=None):
    """Urgency of every node for every trajectory plus a missed flag.

    ``urgency = travel_time(current, n) / (end_time[n] - fleet_distance / speed)``.
    A node is missed when already masked, when the urgency falls outside
    [0, 1], or when its remaining slack is not positive (then the urgency is
    reported as ``+inf``). ``instance`` is accepted for signature symmetry;
    the state already carries its instances.
    """
    inst = state.instances
    speed = inst.speed[:, None, None]
    travel = _dist_from_current(state) / speed
    slack = inst.end_times[:, None, :] - (state.fleet_distance[..., None] / speed)
    ok = slack > TIME_EPS
    urgency = torch.where(ok, travel / torch.where(ok, slack, torch.ones_like(slack)),
                          torch.full_like(slack, URGENCY_SENTINEL))
    missed = state.mask | ~ok | (urgency > 1.0) | (urgency < 0.0)
    return urgency, missed


def _time_missed(state: EnvState, urgency=None) -> torch.Tensor:
    if urgency is None:
        urgency, _ = compute_urgency(state)
    return ~((urgency >= 0.0) & (urgency <= 1.0))


def _customer_feasible(state: EnvState, urgency=None) -> torch.Tensor:
    demand = state.instances.demand[:, None, :]
    ok = (~state.mask & ~_time_missed(state, urgency)
          & (demand <= state.load[..., None] + LOAD_EPS)
          & (state.vehicles_remaining[..., None] > 0))
    ok[..., 0] = False
    return ok


def feasible_actions(state: EnvState, urgency=None) -> torch.Tensor:
    """Boolean (B, T, N); True where the node may be chosen next.

    Done trajectories get the depot as their only (ignored) choice so that
    downstream softmaxes always have a finite entry.
    """
    ok = _customer_feasible(state, urgency)
    any_customer = ok[..., 1:].any(-1)
    at_depot = state.current_node == 0
    ok[..., 0] = ~state.mask[..., 0] | (~any_customer & ~at_depot)
    if state.done.any():
        ok[state.done] = False
        ok[..., 0] |= state.done
    return ok


def force_pomo_starts(state: EnvState) -> torch.Tensor:
    """First action per trajectory: trajectory k starts at customer k + 1.

    A start customer that is already infeasible (unreachable before its
    end-time) is replaced by the lowest-index feasible customer.
    """
    if bool((state.step != 0).any()):
        raise ValueError("POMO starts can only be forced at step 0")
    customers = state.num_nodes - 1
    if state.num_traj != customers:
        raise ValueError(f"POMO needs one trajectory per customer ({customers}), got {state.num_traj}")
    B, T = state.batch_size, state.num_traj
    actions = torch.arange(1, T + 1).expand(B, T).clone()
    ok = feasible_actions(state)
    chosen_ok = torch.gather(ok, 2, actions[..., None])[..., 0]
    if not bool(chosen_ok.all()):
        fallback = ok.to(torch.int8).argmax(-1)  # lowest feasible index (0 for done rows)
        actions = torch.where(chosen_ok, actions, fallback)
    return actions


def step(state: EnvState, actions: torch.Tensor, penalty: float = DEFAULT_PENALTY,
         feasible: Optional[torch.Tensor] = None):
    """Apply one action per trajectory; returns ``(new_state, StepOutcome)``."""
    actions = torch.as_tensor(actions, dtype=torch.long)
    if actions.shape != state.step.shape:
        raise ValueError(f"actions shape {tuple(actions.shape)} != {tuple(state.step.shape)}")
    live = ~state.done
    if feasible is None:
        feasible = feasible_actions(state)
    safe_actions = torch.where(live, actions, torch.zeros_like(actions))
    if bool(((safe_actions < 0) | (safe_actions >= state.num_nodes)).any()):
        raise ContractViolation("action index out of range")
    chosen_ok = torch.gather(feasible, 2, safe_actions[..., None])[..., 0]
    bad = live & ~chosen_ok
    if bool(bad.any()):
        b, k = (int(v) for v in bad.nonzero()[0])
        raise ContractViolation(
            f"masked action {int(actions[b, k])} chosen for live trajectory (batch {b}, traj {k})")
    a = safe_actions
    inst = state.instances

    leg = torch.gather(_dist_from_current(state), 2, a[..., None])[..., 0]
    leg = torch.where(live, leg, torch.zeros_like(leg))
    to_depot = live & (a == 0)
    to_customer = live & (a != 0)
    demand = _gather_nodes(inst.demand, a)

    reward = -leg - penalty * state.load * to_depot
    load_at_return = torch.where(to_depot, state.load, torch.zeros_like(state.load))

    load = torch.where(to_customer, (state.load - demand).clamp_min(0.0), state.load)
    load = torch.where(to_depot, torch.ones_like(load), load)
    vehicles = state.vehicles_remaining - to_depot.long()
    mask = state.mask.clone()
    served = torch.zeros_like(mask)
    served.scatter_(2, a[..., None], to_customer[..., None])
    mask |= served
    current = torch.where(live, a, state.current_node)
    step_count = state.step + live.long()
    visits = state.visits
    if visits is not None:
        visits = torch.cat([visits, torch.where(live, a, torch.full_like(a, -1))[..., None]], -1)

    new = replace(state, step=step_count, current_node=current, load=load,
                  vehicles_remaining=vehicles, fleet_distance=state.fleet_distance + leg,
                  mask=mask, visits=visits)
    # once unreachable, always unreachable: the shortest arrival time only grows
    missed_now = _time_missed(new)
    missed_now[..., 0] = False
    mask = mask | (missed_now & live[..., None])
    mask[..., 0] = torch.where(live, (step_count <= 2) | (current == 0), state.mask[..., 0])
    new = replace(new, mask=mask)

    nothing_left = ~_customer_feasible(new)[..., 1:].any(-1)
    done = state.done | (live & ((vehicles <= 0) | ((current == 0) & nothing_left)))
    new = replace(new, done=done)
    outcome = StepOutcome(reward=torch.where(live, reward, torch.zeros_like(reward)),
                          done=done, returned_to_depot=to_depot, load_at_return=load_at_return)
    return new, outcome


def tours_from_visits(visits: Sequence[int]) -> list:
    """Split a depot-implicit visit sequence into depot-bracketed tours."""
    tours, current = [], [0]
    for a in visits:
        if a == 0:
            current.append(0)
            tours.append(current)
            current = [0]
        else:
            current.append(int(a))
    if len(current) > 1:
        current.append(0)
        tours.append(current)
    return tours
