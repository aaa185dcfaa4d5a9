import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cfq.quant import (QuantAttachment, activation_codes, int_bounds, lsq_init_step, quantize_activations,
                       quantize_weights, weight_codes)

from conftest import central_diff, rel_err


def test_int_bounds_examples():
    assert int_bounds(4) == (-8, 7)
    assert int_bounds(2) == (-2, 1)
    assert int_bounds(8) == (-128, 127)
    for bad in (1, 0, 2.5):
        with pytest.raises(ValueError):
            int_bounds(bad)


def test_quantize_examples():
    assert float(quantize_weights(np.array(0.26), 0.1, 4)) == pytest.approx(0.3)
    assert float(quantize_weights(np.array(5.0), 0.1, 4)) == pytest.approx(0.7)
    assert float(quantize_weights(np.array(-5.0), 0.1, 4)) == pytest.approx(-0.8)
    # half-to-even at exact ties
    np.testing.assert_array_equal(weight_codes(np.array([0.5, 1.5, 2.5, -0.5]), 1.0, 4), [0, 2, 2, 0])
    with pytest.raises(ValueError):
        quantize_weights(np.array(0.3), 0.0, 4)
    with pytest.raises(ValueError):
        quantize_activations(np.array(0.3), -1.0, 0.1, 0, 4)


def test_weight_quantizer_properties_bulk():
    rng = np.random.default_rng(0)
    for b in (2, 3, 4, 8):
        qn, qp = int_bounds(b)
        w = rng.normal(scale=2.0, size=20000)
        s = float(rng.uniform(0.01, 1.0))
        q = quantize_weights(w, s, b)
        assert np.array_equal(quantize_weights(q, s, b), q)
        inside = (w / s >= qn) & (w / s <= qp)
        assert np.all(np.abs(q - w)[inside] <= s / 2 + 1e-12)
        order = np.argsort(w)
        assert np.all(np.diff(q[order]) >= 0)
        codes = weight_codes(w, s, b)
        assert codes.min() >= qn and codes.max() <= qp
        assert np.allclose(q, s * codes)


def test_activation_quantizer_properties_bulk():
    rng = np.random.default_rng(1)
    for b in (2, 4, 8):
        a = rng.normal(scale=3.0, size=20000)
        alpha = 4.0
        s = alpha / (2 ** b - 1)
        q = quantize_activations(a, alpha, s, 0, b)
        assert np.array_equal(quantize_activations(q, alpha, s, 0, b), q)
        inside = (a >= 0) & (a <= alpha)
        assert np.all(np.abs(q - a)[inside] <= s / 2 + 1e-12)
        order = np.argsort(a)
        assert np.all(np.diff(q[order]) >= 0)
        assert q.min() >= 0 and q.max() <= alpha + 1e-12
        codes = activation_codes(a, alpha, s, 0, b)
        assert codes.min() >= 0 and codes.max() <= 2 ** b - 1


@settings(max_examples=300, deadline=None)
@given(st.floats(-100, 100), st.floats(1e-3, 10), st.sampled_from([2, 3, 4, 8]))
def test_weight_quantizer_idempotent_and_on_grid(w, s, b):
    q = quantize_weights(np.array(w), s, b)
    assert quantize_weights(q, s, b) == q
    qn, qp = int_bounds(b)
    assert qn * s - 1e-12 <= q <= qp * s + 1e-12


def _lsq_surrogate(w, s, b, resid):
    qn, qp = int_bounds(b)
    return s * np.clip(w / s, qn, qp) + s * resid


def test_weight_ste_matches_declared_surrogate():
    rng = np.random.default_rng(2)
    b = 3
    qn, qp = int_bounds(b)
    w0 = rng.normal(size=12)
    s0 = 0.37
    # stay clear of clip corners where the finite difference straddles a kink
    w0 = w0[(np.abs(w0 / s0 - qn) > 0.05) & (np.abs(w0 / s0 - qp) > 0.05)]
    resid = np.round(np.clip(w0 / s0, qn, qp)) - np.clip(w0 / s0, qn, qp)
    wt = torch.tensor(w0, requires_grad=True)
    st_ = torch.tensor(s0, dtype=torch.float64, requires_grad=True)
    c = rng.normal(size=len(w0))
    (torch.tensor(c) * quantize_weights(wt, st_, b)).sum().backward()
    gw = central_diff(lambda v: c @ _lsq_surrogate(v, s0, b, resid), w0)
    gs = central_diff(lambda v: c @ _lsq_surrogate(w0, float(v), b, resid), np.array(s0))
    assert rel_err(wt.grad.numpy(), gw) < 1e-4
    assert rel_err(st_.grad.numpy(), gs) < 1e-4
    # closed form of the step gradient
    v = w0 / s0
    expect = np.where(v < qn, qn, np.where(v > qp, qp, np.round(v) - v))
    assert float(st_.grad) == pytest.approx(float(c @ expect), rel=1e-10)


def test_activation_ste_matches_declared_surrogate():
    a0 = np.array([-1.0, 0.3, 1.7, 2.9, 4.5, 6.0])
    alpha0 = 4.0
    at = torch.tensor(a0, requires_grad=True)
    al = torch.tensor(alpha0, dtype=torch.float64, requires_grad=True)
    c = np.arange(1.0, 7.0)
    out = quantize_activations(at, al, alpha0 / 15, 0.0, 4)
    (torch.tensor(c) * out).sum().backward()
    surrogate = lambda a, alpha: np.minimum(np.maximum(a, 0), alpha)
    ga = central_diff(lambda v: c @ surrogate(v, alpha0), a0)
    gal = central_diff(lambda v: c @ surrogate(a0, float(v)), np.array(alpha0))
    assert rel_err(at.grad.numpy(), ga) < 1e-4
    assert rel_err(al.grad.numpy(), gal) < 1e-4


def test_lsq_init_and_attachment_roundtrip():
    w = torch.tensor([[0.5, -0.5], [1.0, -1.0]], dtype=torch.float64)
    assert lsq_init_step(w, 4) == pytest.approx(2 * 0.75 / np.sqrt(7))
    assert lsq_init_step(torch.zeros(3), 4) == 1e-3
    att = QuantAttachment((2, 4), w, True, True)
    back = QuantAttachment.from_dict(att.to_dict())
    assert torch.equal(back.weight_step, att.weight_step)
    assert back.bits == (2, 4)
    with pytest.raises(ValueError):
        QuantAttachment((4, 2))
    att.weight_step.data[0] = -1
    att.clamp_()
    assert float(att.weight_step.detach()[0]) > 0
