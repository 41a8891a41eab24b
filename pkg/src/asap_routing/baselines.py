"""Reference solvers and the solution evaluator shared by all of them."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import torch

from .env import DEFAULT_PENALTY, LOAD_EPS, TIME_EPS, tours_from_visits
from .errors import ParseError, SizeGuardError
from .fileio import atomic_write_text
from .instance import Instance

ORACLE_MAX_CUSTOMERS = 9
ARRIVAL_TOL_S = 1e-6


@dataclass
class Metrics:
    distance: float
    served: float
    penalty: float
    objective: float
    vehicles_used: int
    violations: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return not self.violations


@dataclass
class Solution:
    tours: List[List[int]]
    total_distance: float = 0.0
    served_demand: float = 0.0
    penalty_cost: float = 0.0
    objective: float = 0.0
    feasible: bool = True
    producer: str = ""
    violations: dict = field(default_factory=dict)

    @property
    def vehicles_used(self) -> int:
        return len(self.tours)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Solution":
        if not isinstance(data, dict) or not isinstance(data.get("tours"), list):
            raise ParseError("solution: missing list field 'tours'")
        tours = []
        for i, tour in enumerate(data["tours"]):
            if not isinstance(tour, list) or not all(isinstance(n, int) and not isinstance(n, bool) for n in tour):
                raise ParseError(f"solution.tours[{i}]: expected a list of node indices")
            tours.append(list(tour))
        known = {k: data[k] for k in ("total_distance", "served_demand", "penalty_cost",
                                      "objective", "feasible", "producer", "violations") if k in data}
        return cls(tours=tours, **known)


def build_solution(tours, instance: Instance, penalty: float = DEFAULT_PENALTY, producer: str = "") -> Solution:
    m = evaluate_solution(tours, instance, penalty)
    return Solution(tours=[list(map(int, t)) for t in tours], total_distance=m.distance,
                    served_demand=m.served, penalty_cost=m.penalty, objective=m.objective,
                    feasible=m.feasible, producer=producer, violations=m.violations)


def evaluate_solution(solution, instance: Instance, penalty: float = DEFAULT_PENALTY) -> Metrics:
    """Recompute every metric of a set of depot-bracketed tours from scratch.

    Tours run one after another on a single fleet clock: a customer is served
    in time when the cumulative fleet distance at arrival, divided by the
    speed, does not exceed its end-time. Each tour pays
    ``penalty * (1 - delivered)`` on its return to the depot.
    """
    tours = solution.tours if isinstance(solution, Solution) else solution
    n = instance.num_nodes
    dist = instance.distance_matrix
    violations: dict = {}

    def flag(kind, msg):
        violations.setdefault(kind, []).append(msg)

    for i, tour in enumerate(tours):
        if len(tour) < 2 or tour[0] != 0 or tour[-1] != 0:
            raise ParseError(f"tour {i} is not depot-bracketed: {list(tour)}")
        for node in tour:
            if not 0 <= node < n:
                raise ParseError(f"tour {i} references node {node} outside [0, {n})")

    total, served, pen = 0.0, 0.0, 0.0
    seen = set()
    for i, tour in enumerate(tours):
        delivered = 0.0
        for a, b in zip(tour[:-1], tour[1:]):
            total += dist[a, b]
            if b == 0:
                continue
            if b in seen:
                flag("duplicate", f"customer {b} visited more than once (tour {i})")
            seen.add(b)
            delivered += instance.demand[b]
            if total / instance.speed > instance.end_times[b] + ARRIVAL_TOL_S:
                flag("time", f"customer {b} reached at {total / instance.speed:.3f}s after "
                             f"end-time {instance.end_times[b]:.3f}s (tour {i})")
        if any(node == 0 for node in tour[1:-1]):
            flag("format", f"tour {i} passes through the depot mid-route")
        if delivered > 1.0 + LOAD_EPS:
            flag("capacity", f"tour {i} delivers {delivered:.6f} > capacity 1")
        served += delivered
        pen += penalty * max(0.0, 1.0 - delivered)
    if len(tours) > instance.fleet_size:
        flag("fleet", f"{len(tours)} tours exceed fleet size {instance.fleet_size}")
    return Metrics(distance=float(total), served=float(served), penalty=float(pen),
                   objective=float(total + pen), vehicles_used=len(tours), violations=violations)


class _Trajectory:
    """Scalar mirror of the environment rules for one trajectory."""

    __slots__ = ("inst", "dist", "cur", "load", "vehicles", "fd", "step", "blocked", "cost", "done")

    def __init__(self, inst: Instance):
        self.inst = inst
        self.dist = inst.distance_matrix.tolist()
        self.cur = 0
        self.load = 1.0
        self.vehicles = inst.fleet_size
        self.fd = 0.0
        self.step = 0
        self.blocked = [False] * inst.num_nodes  # visited or missed
        self.cost = 0.0
        self.done = not self.customers()

    def copy(self) -> "_Trajectory":
        t = object.__new__(_Trajectory)
        for s in self.__slots__:
            setattr(t, s, getattr(self, s))
        t.blocked = list(self.blocked)
        return t

    def _reachable(self, n: int) -> bool:
        speed = self.inst.speed
        slack = self.inst.end_times[n] - self.fd / speed
        if not slack > TIME_EPS:
            return False
        u = (self.dist[self.cur][n] / speed) / slack
        return 0.0 <= u <= 1.0

    def customers(self) -> List[int]:
        if self.vehicles <= 0:
            return []
        demand = self.inst.demand
        return [n for n in range(1, self.inst.num_nodes)
                if not self.blocked[n] and demand[n] <= self.load + LOAD_EPS and self._reachable(n)]

    def actions(self) -> List[int]:
        if self.done:
            return []
        cust = self.customers()
        depot_open = self.cur != 0 and (self.step > 2 or not cust)
        return ([0] if depot_open else []) + cust

    def apply(self, a: int, penalty: float) -> None:
        leg = self.dist[self.cur][a]
        self.fd += leg
        self.cost += leg
        if a == 0:
            self.cost += penalty * self.load
            self.vehicles -= 1
            self.load = 1.0
        else:
            self.load = max(0.0, self.load - self.inst.demand[a])
            self.blocked[a] = True
        self.cur = a
        self.step += 1
        for n in range(1, self.inst.num_nodes):
            if not self.blocked[n] and not self._reachable(n):
                self.blocked[n] = True
        self.done = self.vehicles <= 0 or (a == 0 and not self.customers())


def replay_cost(instance: Instance, actions: Sequence[int], penalty: float = DEFAULT_PENALTY) -> float:
    """Objective of an action sequence under the environment rules; raises on an illegal action."""
    traj = _Trajectory(instance)
    for a in actions:
        if a not in traj.actions():
            raise ValueError(f"action {a} is not allowed at step {traj.step}")
        traj.apply(a, penalty)
    return traj.cost


def greedy_heuristic(instance: Instance, penalty: float = DEFAULT_PENALTY) -> Solution:
    """Nearest feasible customer first; return to the depot when none is left."""
    traj = _Trajectory(instance)
    seq = []
    while not traj.done:
        cust = traj.customers()
        if cust:
            row = traj.dist[traj.cur]
            a = min(cust, key=lambda n: (row[n], n))
        else:
            a = 0
        traj.apply(a, penalty)
        seq.append(a)
    return build_solution(tours_from_visits(seq), instance, penalty, producer="greedy")


def brute_force_oracle(instance: Instance, penalty: float = DEFAULT_PENALTY) -> Solution:
    """Exact minimum-objective action sequence by depth-first branch and bound.

    Actions are expanded in increasing node order and only strict
    improvements replace the incumbent, so ties resolve to the
    lexicographically smallest sequence.
    """
    if instance.num_customers > ORACLE_MAX_CUSTOMERS:
        raise SizeGuardError(f"oracle supports at most {ORACLE_MAX_CUSTOMERS} customers, "
                             f"got {instance.num_customers}")
    demand = instance.demand
    dist = instance.distance_matrix.tolist()
    greedy = greedy_heuristic(instance, penalty)
    best_cost = greedy.objective
    best_seq = [n for tour in greedy.tours for n in tour[1:]]
    seq: List[int] = []

    def bound(t: _Trajectory) -> float:
        remaining = sum(demand[n] for n in range(1, instance.num_nodes) if not t.blocked[n])
        if t.cur != 0:
            return t.cost + dist[t.cur][0] + penalty * max(0.0, t.load - remaining)
        # live at the depot: another tour must start from an open customer
        nearest = min(dist[0][n] for n in t.customers())
        return t.cost + 2 * nearest + penalty * max(0.0, 1.0 - remaining)

    def search(t: _Trajectory) -> None:
        nonlocal best_cost, best_seq
        if t.done:
            if t.cost < best_cost - 1e-9 or (abs(t.cost - best_cost) <= 1e-9 and seq < best_seq):
                best_cost, best_seq = t.cost, list(seq)
            return
        if bound(t) > best_cost + 1e-9:
            return
        for a in t.actions():
            child = t.copy()
            child.apply(a, penalty)
            seq.append(a)
            search(child)
            seq.pop()

    search(_Trajectory(instance))
    return build_solution(tours_from_visits(best_seq), instance, penalty, producer="oracle")


def policy_solutions(policy, instance: Instance, mode: str = "greedy", generator=None,
                     penalty: float = DEFAULT_PENALTY, trace: bool = False):
    """All POMO trajectory solutions plus the raw episode record."""
    from .policy import rollout_episode

    record, state = rollout_episode(policy, [instance], mode=mode, generator=generator,
                                    penalty=penalty, trace=trace)
    sols = [build_solution(tours_from_visits(state.visit_order(0, k)), instance, penalty,
                           producer=f"policy-{mode}")
            for k in range(state.num_traj)]
    return sols, record, state


def solve_with_policy(policy, instance: Instance, mode: str = "greedy", generator=None,
                      penalty: float = DEFAULT_PENALTY) -> Solution:
    """Best (minimum-objective) trajectory among the POMO rollouts."""
    if isinstance(policy, (str, bytes)) or hasattr(policy, "__fspath__"):
        from .trainer import load_checkpoint
        policy, _ = load_checkpoint(policy)
    sols, _, _ = policy_solutions(policy, instance, mode, generator, penalty)
    return min(sols, key=lambda s: s.objective)


def save_solution(solution: Solution, path) -> None:
    atomic_write_text(path, json.dumps(solution.to_dict(), indent=1) + "\n")


def load_solution(path) -> Solution:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return Solution.from_dict(data)
