import math

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from asap_routing import Instance

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_instance(coords, demand, end_times, fleet=5, speed=0.014, capacity=40.0):
    """Hand-built instance; ``demand`` in raw units, depot first."""
    return Instance(coords=np.asarray(coords, float), demand=np.asarray(demand, float) / capacity,
                    end_times=np.asarray(end_times, float), fleet_size=fleet,
                    capacity_raw=capacity, speed=speed)


def naive_distance(a, b):
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2)


@pytest.fixture
def tiny_policy():
    from asap_routing.policy import AttentionPolicy, PolicyConfig
    return AttentionPolicy(PolicyConfig(embed_dim=16, heads=4, ff_dim=32, critic_hidden=16), seed=3,
                           dtype=torch.float64)


def random_episode(instances, num_traj, generator, penalty=10.0, force_starts=False):
    """Roll a uniformly random feasible policy; returns [(state, actions, next_state, outcome), ...]."""
    from asap_routing import env
    state = env.reset(instances, num_traj)
    cap = 2 * (state.num_nodes + int(state.instances.fleet_size.max()))
    trace = []
    for t in range(cap + 1):
        if bool(state.done.all()):
            break
        feas = env.feasible_actions(state)
        if t == 0 and force_starts:
            actions = env.force_pomo_starts(state)
        else:
            noise = torch.rand(feas.shape, generator=generator, dtype=torch.float64)
            actions = torch.where(feas, noise, torch.full_like(noise, -1.0)).argmax(-1)
        nxt, out = env.step(state, actions, penalty=penalty)
        trace.append((state, actions, nxt, out))
        state = nxt
    return trace


def gradcheck_setup(seed=0, dim=16, customers=6, batch=2, traj=3, warm_steps=3):
    """Small float64 policy plus a mid-episode state for full-network gradient checks."""
    from asap_routing import env
    from asap_routing.instance import generate_instance
    from asap_routing.policy import AttentionPolicy, PolicyConfig
    policy = AttentionPolicy(PolicyConfig(embed_dim=dim, heads=4, ff_dim=2 * dim, critic_hidden=dim),
                             seed=seed, dtype=torch.float64)
    insts = [generate_instance(customers, 100 + seed + b) for b in range(batch)]
    gen = torch.Generator().manual_seed(seed)
    state = env.reset(insts, traj)
    for _ in range(warm_steps):
        feas = env.feasible_actions(state)
        noise = torch.rand(feas.shape, generator=gen, dtype=torch.float64)
        state, _ = env.step(state, torch.where(feas, noise, torch.full_like(noise, -1.0)).argmax(-1))
    weights = torch.rand(batch, traj, customers + 1, generator=gen, dtype=torch.float64)
    # same forward as rollouts and updates: batch norm on running statistics
    policy.refresh_norm_stats(insts)

    def loss():
        enc = policy.encode(policy.embed_nodes(state), training=False)
        out = policy.decode_step(enc, state)
        logp = torch.log_softmax(out.logits, -1)
        finite = torch.isfinite(logp)
        policy_term = torch.where(finite, logp * weights, torch.zeros_like(logp)).sum()
        return policy_term + (policy.critic_value(out.glimpse) ** 2).sum() * 0.1

    return policy, state, loss


def full_gradient_error(policy, loss, h=1e-5, floor=1e-5):
    """Autograd vs central differences over every parameter.

    Returns ``(max_relative, global_relative)``. The per-entry denominator is
    floored at ``floor`` because entries whose true gradient is ~0 only carry
    central-difference roundoff (eps * |loss| / h, about 1e-10 here).
    """
    policy.params.zero_grad()
    loss().backward()
    worst, diff2, sum2 = 0.0, 0.0, 0.0
    with torch.no_grad():
        for name, p in policy.params.named():
            analytic = p.grad.reshape(-1)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                a = analytic[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
                diff2 += (a - num) ** 2
                sum2 += (a + num) ** 2
    return worst, math.sqrt(diff2 / max(sum2, 1e-300))


ACCEPTANCE_LINES = []


def report(number, ok, detail):
    """Record and print one acceptance verdict line."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
