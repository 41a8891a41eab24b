import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from asap_routing.errors import ConfigurationError, ContractViolation, IntegrityError, ShapeError
from asap_routing.numerics import (AdamState, ParamStore, backward, batch_norm, categorical_sample, clip_grad_norm,
                                   linear, log_softmax, multi_head_attention, optimizer_step, softmax)

F64 = torch.float64


def rand(*shape, seed=0, grad=False):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=F64).requires_grad_(grad)


def central_diff(fn, tensors, h=1e-5):
    """Finite-difference gradient of scalar ``fn()`` w.r.t. every tensor."""
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat, gflat = t.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def assert_grads_match(fn, tensors, tol=1e-4):
    for t in tensors:
        t.grad = None
    backward(fn())
    analytic = [t.grad.clone() for t in tensors]
    with torch.no_grad():
        numeric = central_diff(fn, tensors)
    for a, n in zip(analytic, numeric):
        err = ((a - n).abs() / torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-6)).max().item()
        assert err < tol


# -- linear ---------------------------------------------------------------------

def test_linear_identity_and_zero_input():
    x = rand(3, 4)
    assert torch.equal(linear(x, torch.eye(4, dtype=F64), torch.zeros(4, dtype=F64)), x)
    b = rand(5, seed=1)
    assert torch.equal(linear(torch.zeros(2, 3, 4, dtype=F64), rand(4, 5), b), b.expand(2, 3, 5))


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
def test_linear_matches_triple_loop(rows, fin, fout, seed):
    x, W, b = rand(rows, fin, seed=seed), rand(fin, fout, seed=seed + 1), rand(fout, seed=seed + 2)
    y = linear(x, W, b)
    for i in range(rows):
        for j in range(fout):
            acc = b[j].item()
            for k in range(fin):
                acc += x[i, k].item() * W[k, j].item()
            assert abs(y[i, j].item() - acc) <= 1e-12


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        linear(rand(2, 3), rand(4, 5))


def test_linear_gradients():
    x, W, b = rand(3, 4, grad=True), rand(4, 2, seed=1, grad=True), rand(2, seed=2, grad=True)
    assert_grads_match(lambda: (linear(x, W, b) ** 2).sum(), [x, W, b])


# -- softmax ----------------------------------------------------------------------

def test_softmax_rows_and_masking():
    logits = rand(5, 7)
    p = softmax(logits)
    assert torch.allclose(p.sum(-1), torch.ones(5, dtype=F64), atol=1e-9)
    masked = logits.clone()
    masked[:, 2] = -math.inf
    q = softmax(masked)
    assert torch.all(q[:, 2] == 0)
    keep = torch.ones(7, dtype=torch.bool)
    keep[2] = False
    assert torch.allclose(q[:, keep], p[:, keep] / p[:, keep].sum(-1, keepdim=True), atol=1e-12)


def test_softmax_stable_for_large_logits():
    x = torch.tensor([[700.0, -700.0, 699.0], [-700.0, -700.0, -699.0]], dtype=F64)
    p = softmax(x)
    assert torch.isfinite(p).all()
    assert p[0, 0].item() == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert torch.isfinite(log_softmax(x)).all()


# -- attention ----------------------------------------------------------------------

def test_attention_single_key():
    q, k, v = rand(1, 3, 4), rand(1, 1, 4, seed=1), rand(1, 1, 4, seed=2)
    w = rand(4, 4, seed=3)
    out = multi_head_attention(q, k, v, heads=2, w_out=w)
    assert torch.allclose(out, (v @ w).expand(1, 3, 4), atol=1e-14)


def test_attention_two_tokens_hand_unrolled():
    q = torch.tensor([[1.0, 2.0]], dtype=F64)
    k = torch.tensor([[0.5, -1.0], [2.0, 0.0]], dtype=F64)
    v = torch.tensor([[1.0, 3.0], [-2.0, 4.0]], dtype=F64)
    s0 = (1 * 0.5 + 2 * -1.0) / math.sqrt(2)
    s1 = (1 * 2.0 + 2 * 0.0) / math.sqrt(2)
    w0 = math.exp(s0) / (math.exp(s0) + math.exp(s1))
    w1 = 1 - w0
    expected = [w0 * 1 + w1 * -2, w0 * 3 + w1 * 4]
    out = multi_head_attention(q, k, v, heads=1)
    assert out[0].tolist() == pytest.approx(expected, abs=1e-12)


def test_attention_mask_ignores_value_row():
    q, k, v = rand(2, 3, 8), rand(2, 5, 8, seed=1), rand(2, 5, 8, seed=2)
    mask = torch.zeros(2, 3, 5, dtype=torch.bool)
    mask[..., 3] = True
    out = multi_head_attention(q, k, v, 4, mask)
    v2 = v.clone()
    v2[:, 3] += 100.0
    k2 = k.clone()
    k2[:, 3] -= 50.0
    assert torch.allclose(out, multi_head_attention(q, k2, v2, 4, mask), atol=1e-12)


def test_attention_invariant_to_masked_key_permutation():
    q, k, v = rand(1, 2, 4), rand(1, 6, 4, seed=1), rand(1, 6, 4, seed=2)
    mask = torch.zeros(1, 2, 6, dtype=torch.bool)
    mask[..., [1, 4]] = True
    perm = [0, 4, 2, 3, 1, 5]  # swap the masked keys
    out = multi_head_attention(q, k, v, 2, mask)
    assert torch.allclose(out, multi_head_attention(q, k[:, perm], v[:, perm], 2, mask), atol=1e-14)


def test_attention_errors():
    with pytest.raises(ConfigurationError):
        multi_head_attention(rand(1, 2, 6), rand(1, 2, 6), rand(1, 2, 6), heads=4)
    mask = torch.zeros(1, 2, 3, dtype=torch.bool)
    mask[0, 1] = True
    with pytest.raises(ContractViolation):
        multi_head_attention(rand(1, 2, 4), rand(1, 3, 4), rand(1, 3, 4), 2, mask)


def test_attention_gradients():
    q, k, v = rand(2, 3, 4, grad=True), rand(2, 5, 4, seed=1, grad=True), rand(2, 5, 4, seed=2, grad=True)
    w = rand(4, 4, seed=3, grad=True)
    mask = torch.zeros(2, 3, 5, dtype=torch.bool)
    mask[0, :, 1] = True
    assert_grads_match(lambda: (multi_head_attention(q, k, v, 2, mask, w) ** 2).sum(), [q, k, v, w])


# -- batch norm --------------------------------------------------------------------

def bn_params(c):
    return (torch.ones(c, dtype=F64), torch.zeros(c, dtype=F64), torch.zeros(c, dtype=F64),
            torch.ones(c, dtype=F64))


def test_batch_norm_constant_channel_gives_beta():
    g, b, rm, rv = bn_params(3)
    b = torch.tensor([0.5, -1.0, 2.0], dtype=F64)
    x = torch.full((4, 5, 3), 7.0, dtype=F64)
    assert torch.allclose(batch_norm(x, g, b, rm, rv, training=True), b.expand(4, 5, 3))


def test_batch_norm_train_statistics():
    x = rand(6, 7, 5) * 3 + 2
    y = batch_norm(x, *bn_params(5), training=True).reshape(-1, 5)
    assert torch.allclose(y.mean(0), torch.zeros(5, dtype=F64), atol=1e-6)
    assert torch.allclose(y.var(0, unbiased=False), torch.ones(5, dtype=F64), atol=1e-6 + 1e-4)


def test_batch_norm_running_stats_converge():
    g, b, rm, rv = bn_params(4)
    gen = torch.Generator().manual_seed(0)
    scale = torch.tensor([1.0, 2.0, 0.5, 3.0], dtype=F64)
    shift = torch.tensor([0.0, -1.0, 4.0, 2.0], dtype=F64)
    x = torch.randn(4096, 4, generator=gen, dtype=F64) * scale + shift
    for _ in range(300):
        batch_norm(x, g, b, rm, rv, training=True, momentum=0.1)
    train_out = batch_norm(x, g, b, rm.clone(), rv.clone(), training=True, update_stats=False)
    eval_out = batch_norm(x, g, b, rm, rv, training=False)
    assert (train_out - eval_out).abs().max().item() < 1e-3


def test_batch_norm_single_position_rejected():
    with pytest.raises(ContractViolation):
        batch_norm(rand(1, 3), *bn_params(3), training=True)


def test_batch_norm_gradients():
    x = rand(3, 4, 2, grad=True)
    g, b = rand(2, seed=1, grad=True), rand(2, seed=2, grad=True)
    _, _, rm, rv = bn_params(2)
    w = rand(3, 4, 2, seed=5)
    fn = lambda: (batch_norm(x, g, b, rm, rv, training=True, update_stats=False) * w).sum() ** 2
    assert_grads_match(fn, [x, g, b])


# -- backward & optimizer -------------------------------------------------------------

def test_backward_sum_and_accumulation():
    x = rand(3, 2, grad=True)
    backward(x.sum())
    assert torch.equal(x.grad, torch.ones(3, 2, dtype=F64))
    backward(x.sum())
    assert torch.equal(x.grad, 2 * torch.ones(3, 2, dtype=F64))


def test_backward_linear_weight_gradient():
    x, W = rand(4, 3), rand(3, 2, seed=1, grad=True)
    backward(linear(x, W).sum())
    assert torch.allclose(W.grad, x.T @ torch.ones(4, 2, dtype=F64), atol=1e-14)


def test_backward_rejects_non_scalar():
    x = rand(3, grad=True)
    with pytest.raises(ContractViolation):
        backward(x * 2)


def test_adam_single_step_by_hand():
    store = ParamStore(F64)
    p = store.add("w", (1,), fill=2.0)
    st_ = AdamState()
    p.grad = torch.tensor([0.5], dtype=F64)
    optimizer_step(store, st_, lr=0.1)
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    m_hat, v_hat = m / 0.1, v / 0.001
    assert p.item() == pytest.approx(2.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)
    assert p.grad is None
    # second step from known (g, m, v)
    p.grad = torch.tensor([-1.0], dtype=F64)
    before = p.item()
    optimizer_step(store, st_, lr=0.1)
    m2 = 0.9 * m + 0.1 * -1.0
    v2 = 0.999 * v + 0.001 * 1.0
    step = 0.1 * (m2 / (1 - 0.9 ** 2)) / (math.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert p.item() == pytest.approx(before - step, abs=1e-15)


def test_adam_zero_gradient_is_null_update():
    store = ParamStore(F64, seed=4)
    w = store.add("w", (3, 3), fan_in=3)
    before = w.detach().clone()
    w.grad = torch.zeros_like(w)
    optimizer_step(store, AdamState(), 0.01)
    assert torch.equal(w.detach(), before)


def test_adam_missing_gradient():
    store = ParamStore(F64)
    store.add("w", (2,), fill=0.0)
    with pytest.raises(ContractViolation):
        optimizer_step(store, AdamState(), 0.01)


def test_adam_deterministic_trajectories():
    def run():
        store = ParamStore(F64, seed=9)
        w = store.add("w", (4, 2), fan_in=4)
        x = rand(5, 4, seed=3)
        state = AdamState()
        for _ in range(20):
            backward((linear(x, w) ** 2).sum())
            optimizer_step(store, state, 0.05)
        return w.detach().clone()
    assert torch.equal(run(), run())


def test_clip_grad_norm():
    store = ParamStore(F64)
    a = store.add("a", (2,), fill=0.0)
    a.grad = torch.tensor([3.0, 4.0], dtype=F64)
    assert clip_grad_norm(store, 0.5) == pytest.approx(5.0)
    assert a.grad.norm().item() == pytest.approx(0.5, rel=1e-5)


# -- sampling ------------------------------------------------------------------------

def test_sample_single_finite_logit():
    logits = torch.tensor([[-math.inf, 1.3, -math.inf]], dtype=F64)
    idx, logp, ent = categorical_sample(logits, torch.Generator().manual_seed(0))
    assert idx.item() == 1 and logp.item() == 0.0 and ent.item() == 0.0


def test_sample_never_draws_masked():
    logits = torch.tensor([0.0, -math.inf, 2.0, -math.inf], dtype=F64).expand(100_000, 4)
    idx, _, _ = categorical_sample(logits, torch.Generator().manual_seed(1))
    assert not torch.isin(idx, torch.tensor([1, 3])).any()


def test_sample_frequencies_binomial():
    n = 100_000
    logits = torch.tensor([0.0, math.log(3)], dtype=F64).expand(n, 2)
    idx, logp, _ = categorical_sample(logits, torch.Generator().manual_seed(2))
    share = idx.double().mean().item()
    sigma = math.sqrt(0.75 * 0.25 / n)
    assert abs(share - 0.75) < 3 * sigma
    assert torch.allclose(logp[idx == 1], torch.tensor(math.log(0.75), dtype=F64))


def test_sample_all_masked_row():
    with pytest.raises(ContractViolation):
        categorical_sample(torch.full((2, 3), -math.inf), torch.Generator())


# -- parameter store -------------------------------------------------------------------

def test_init_bounds_and_determinism():
    a, b = ParamStore(F64, seed=5), ParamStore(F64, seed=5)
    wa, wb = a.add("w", (64, 32), fan_in=64), b.add("w", (64, 32), fan_in=64)
    assert torch.equal(wa, wb)
    assert wa.abs().max().item() <= 1 / 8
    assert wa.requires_grad


def test_duplicate_name_rejected():
    s = ParamStore()
    s.add("w", (2,), fill=1.0)
    with pytest.raises(ConfigurationError):
        s.add("w", (2,), fill=1.0)


def test_serialization_round_trip_and_layout():
    s = ParamStore(F64, seed=1)
    s.add("layer.W", (3, 2), fan_in=3)
    s.add_buffer("bn.running_var", torch.ones(2))
    data = s.to_bytes()
    assert data[:8] == b"PSTORE01"
    back = ParamStore.from_bytes(data, dtype=F64)
    assert torch.equal(back["layer.W"], s["layer.W"]) and torch.equal(back["bn.running_var"], s["bn.running_var"])
    # the first tensor payload is little-endian float64, row-major
    header = 8 + 4 + 3 + len("layer.W") + 1 + 8
    first = struct.unpack_from("<d", data, header)[0]
    assert first == s["layer.W"][0, 0].item()


@pytest.mark.parametrize("cut", [1, 10, 40])
def test_truncated_payload(cut):
    s = ParamStore(F64)
    s.add("w", (4, 4), fan_in=4)
    data = s.to_bytes()
    with pytest.raises(IntegrityError):
        ParamStore.from_bytes(data[:-cut])
    with pytest.raises(IntegrityError):
        ParamStore.from_bytes(data + b"\0")
    with pytest.raises(IntegrityError):
        ParamStore.from_bytes(b"XXXXXXXX" + data[8:])
