import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from asap_routing import env
from asap_routing.baselines import (Solution, brute_force_oracle, build_solution, evaluate_solution,
                                    greedy_heuristic, load_solution, policy_solutions, replay_cost,
                                    save_solution, solve_with_policy)
from asap_routing.errors import ParseError, SizeGuardError
from asap_routing.instance import GenerationConfig, Instance, generate_instance
from asap_routing.policy import AttentionPolicy, PolicyConfig, rollout_episode
from asap_routing.trainer import save_checkpoint

from conftest import make_instance, random_episode
from enumerator import best_sequence


def flatten(tours):
    return [n for t in tours for n in t[1:]]


def test_out_and_back_tour():
    inst = make_instance([(0, 0), (0.3, 0.4)], [0, 8], [10_000, 9000])
    m = evaluate_solution([[0, 1, 0]], inst, 10)
    assert m.distance == pytest.approx(1.0) and m.served == pytest.approx(0.2)
    assert m.penalty == pytest.approx(8.0) and m.objective == pytest.approx(9.0)
    assert m.feasible


def test_empty_solution():
    m = evaluate_solution([], generate_instance(4, 1))
    assert (m.distance, m.served, m.penalty, m.objective) == (0, 0, 0, 0)


@pytest.mark.parametrize("tours", [[[1, 0]], [[0, 1]], [[0]], [[0, 9, 0]]])
def test_malformed_tours(tours):
    with pytest.raises(ParseError):
        evaluate_solution(tours, generate_instance(4, 1))


def test_violations_are_typed():
    inst = make_instance([(0, 0), (0.1, 0), (0.2, 0), (0.9, 0.9)], [0, 30, 30, 1], [10_000, 9000, 9000, 51],
                         fleet=1)
    m = evaluate_solution([[0, 1, 2, 0], [0, 1, 0], [0, 3, 0]], inst)
    assert set(m.violations) == {"capacity", "duplicate", "fleet", "time"}
    assert not m.feasible
    assert "format" in evaluate_solution([[0, 1, 0, 2, 0]], inst).violations


def test_time_feasibility_uses_shared_clock():
    # the second tour starts after the first one's 2 * 0.5 du = 71.4 s
    inst = make_instance([(0, 0), (0.5, 0), (0, 0.5)], [0, 1, 1], [10_000, 9000, 60])
    assert evaluate_solution([[0, 2, 0], [0, 1, 0]], inst).feasible
    assert "time" in evaluate_solution([[0, 1, 0], [0, 2, 0]], inst).violations


def test_greedy_single_customer():
    inst = generate_instance(1, 3)
    assert greedy_heuristic(inst).tours == [[0, 1, 0]]


def test_greedy_collinear_order():
    inst = make_instance([(0, 0), (0.3, 0), (0.1, 0), (0.2, 0)], [0, 1, 1, 1], [10_000] * 4)
    assert greedy_heuristic(inst).tours == [[0, 2, 3, 1, 0]]


def test_greedy_feasible_on_thousand_instances():
    for seed in range(1000):
        inst = generate_instance(1 + seed % 15, seed)
        sol = greedy_heuristic(inst)
        m = evaluate_solution(sol, inst)
        assert m.feasible, (seed, m.violations)
        assert abs(m.objective - sol.objective) <= 1e-9


def test_oracle_single_customer():
    inst = make_instance([(0, 0), (0.6, 0.8)], [0, 6], [10_000, 9000])
    sol = brute_force_oracle(inst)
    assert sol.tours == [[0, 1, 0]]
    assert sol.objective == pytest.approx(2 * 1.0 + 10 * (1 - 0.15), abs=1e-12)


def test_oracle_size_guard():
    with pytest.raises(SizeGuardError):
        brute_force_oracle(generate_instance(10, 1))


@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 4))
def test_oracle_matches_independent_enumerator(seed, n, fleet):
    inst = generate_instance(n, seed, GenerationConfig(fleet_size=fleet))
    cost, seq = best_sequence(inst)
    sol = brute_force_oracle(inst)
    assert abs(sol.objective - cost) <= 1e-9
    assert flatten(sol.tours) == seq


def test_oracle_handles_tight_deadlines():
    cfg = GenerationConfig(min_end_time=50, max_end_time=120)
    for seed in range(30):
        inst = generate_instance(5, seed, cfg)
        cost, seq = best_sequence(inst)
        sol = brute_force_oracle(inst)
        assert abs(sol.objective - cost) <= 1e-9 and flatten(sol.tours) == seq


@given(st.integers(0, 10**6))
def test_oracle_not_worse_than_greedy(seed):
    inst = generate_instance(1 + seed % 7, seed)
    assert brute_force_oracle(inst).objective <= greedy_heuristic(inst).objective + 1e-12


def test_oracle_mirror_invariance():
    for seed in range(10):
        inst = generate_instance(6, seed)
        coords = inst.coords.copy()
        coords[:, 0] = 1 - coords[:, 0]
        mirrored = Instance(coords=coords, demand=inst.demand, end_times=inst.end_times)
        assert brute_force_oracle(mirrored).objective == pytest.approx(brute_force_oracle(inst).objective,
                                                                       abs=1e-9)


def test_oracle_solution_is_feasible_and_consistent():
    for seed in range(20):
        inst = generate_instance(7, seed)
        sol = brute_force_oracle(inst)
        assert evaluate_solution(sol, inst).feasible
        assert replay_cost(inst, flatten(sol.tours)) == pytest.approx(sol.objective, abs=1e-9)


@given(st.integers(0, 10**6), st.integers(1, 12))
def test_evaluator_matches_environment_return(seed, n):
    insts = [generate_instance(n, seed + b) for b in range(2)]
    trace = random_episode(insts, n, torch.Generator().manual_seed(seed))
    ret = sum(out.reward for _, _, _, out in trace)
    final = trace[-1][2]
    for b, inst in enumerate(insts):
        for k in range(n):
            tours = env.tours_from_visits(final.visit_order(b, k))
            m = evaluate_solution(tours, inst)
            assert m.feasible
            assert abs(-ret[b, k].item() - m.objective) <= 1e-9


def test_solution_file_round_trip(tmp_path):
    inst = generate_instance(6, 2)
    sol = greedy_heuristic(inst)
    save_solution(sol, tmp_path / "s.json")
    back = load_solution(tmp_path / "s.json")
    assert back == sol
    (tmp_path / "bad.json").write_text('{"tours": [[0, "a", 0]]}')
    with pytest.raises(ParseError):
        load_solution(tmp_path / "bad.json")


def test_policy_solutions_are_feasible_and_min_selected(tmp_path):
    policy = AttentionPolicy(PolicyConfig(embed_dim=16, heads=4, ff_dim=32), seed=2)
    inst = generate_instance(8, 5)
    sols, record, state = policy_solutions(policy, inst)
    assert len(sols) == 8
    for k, s in enumerate(sols):
        assert s.feasible
        assert abs(s.objective + record.returns[0, k].item()) <= 1e-9
    best = solve_with_policy(policy, inst)
    assert best.objective == min(s.objective for s in sols)
    save_checkpoint(policy, tmp_path / "p.ckpt")
    assert solve_with_policy(tmp_path / "p.ckpt", inst).tours == best.tours
