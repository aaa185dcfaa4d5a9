import json
from dataclasses import replace

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from cfq.data import CostSpec
from cfq.mixed import bit_cost
from cfq.nn import ModelGraph, predict
from cfq.recourse import ActionSet, SolverConfig, gradient_recourse
from cfq.train import (CfqConfig, baseline_train, hard_bit_cost, hinge_margin_loss, match_loss,
                       sweep_hyperparams, train_cfq, uniform_bits_for_budget, validity_loss)

from conftest import small_task

FAST = CfqConfig(epochs=2, batch_size=64)


@pytest.fixture(scope="module")
def task():
    return small_task()


def _quantized(teacher, bits=(4,)):
    m = teacher.clone()
    m.attach_quantizers(bits, with_policy=False)
    m.fixed_bits = [bits[0]] * m.n_layers
    return m


def test_validity_and_hinge_values(task):
    data, _, teacher = task
    mq = _quantized(teacher)
    x = data.x_train[:5]
    dfp = np.full_like(x, 0.1)
    y = np.ones(5, dtype=int)
    logits = mq(x + dfp, "quantized").detach()
    assert float(validity_loss(mq, x, dfp, y).detach()) == pytest.approx(float(F.cross_entropy(logits, torch.tensor(y))))
    m = (logits[:, 1] - logits[:, 0]).numpy()
    assert float(hinge_margin_loss(mq, x, dfp, y, 0.5).detach()) == pytest.approx(float(np.maximum(0.5 - m, 0).mean()))
    with pytest.raises(ValueError):
        hinge_margin_loss(mq, x, dfp, y, 0.0)


def test_match_loss_value_and_stop_gradient_contract():
    cost = CostSpec(np.array([1.0, 2.0]))
    dq = torch.tensor([[1.0, 0.0]], dtype=torch.float64, requires_grad=True)
    dfp = torch.tensor([[0.0, 1.0]], dtype=torch.float64, requires_grad=True)
    loss = match_loss(dq, dfp, cost, alpha1=1.0, alpha2=0.5)
    assert float(loss.detach()) == pytest.approx(2.0 + 0.5 * 1.0)
    loss.backward()
    assert dfp.grad is None          # the teacher action is a constant
    np.testing.assert_allclose(dq.grad.numpy(), [[1.0 - 0.5, -1.0]])
    with pytest.raises(ValueError):
        match_loss(dq.detach(), dfp, cost, 1.0, 0.0)


def test_match_loss_reaches_backbone_through_student_unroll(task):
    data, _, teacher = task
    mq = _quantized(teacher)
    x = data.x_train[:8]
    dq = gradient_recourse(mq, x, [1] * 8, data.aset, SolverConfig.student(), "quantized", create_graph=True)
    match_loss(dq, np.zeros_like(x), data.cost, 1.0, 1.0).backward()
    assert float(mq.weights[0].grad.abs().sum()) > 0


def test_two_quantized_forwards_per_step(task):
    data, _, teacher = task
    cfg = replace(FAST, epochs=1)
    model, log = train_cfq(teacher, data, cfg)
    steps = model.train_stats["steps"]
    assert steps == int(np.ceil(len(data.y_train) / cfg.batch_size))
    assert model.train_stats["quantized_forwards"] == 2 * steps
    assert log[-1]["quantized_forwards"] == 2 * steps


def test_training_is_deterministic_and_meets_budget(task):
    data, _, teacher = task
    a, log_a = train_cfq(teacher, data, FAST)
    b, log_b = train_cfq(teacher, data, FAST)
    assert json.dumps(log_a, sort_keys=True) == json.dumps(log_b, sort_keys=True)
    assert a.deployed_bits() == b.deployed_bits()
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    budget = FAST.budget(a.layer_sizes())
    assert budget.within(hard_bit_cost(a))
    assert teacher.backbone_checksum() != a.backbone_checksum()


def test_teacher_is_frozen(task):
    data, _, teacher = task
    before = teacher.backbone_checksum()
    train_cfq(teacher, data, replace(FAST, epochs=1))
    assert teacher.backbone_checksum() == before


def test_eta_zero_skips_the_teacher(task):
    data, _, teacher = task
    model, log = train_cfq(teacher, data, replace(FAST, epochs=1, eta=0.0))
    assert "loss_valid" not in log[0]
    assert model.train_stats["quantized_forwards"] == model.train_stats["steps"]


def test_match_and_hinge_terms_are_logged(task):
    data, _, teacher = task
    cfg = replace(FAST, epochs=1, match_on=True, hinge_on=True, alpha1=0.1, alpha2=0.1, beta=0.5)
    _, log = train_cfq(teacher, data, cfg)
    assert {"loss_match", "loss_hinge", "loss_valid", "loss_task"} <= set(log[0])


def test_nan_aborts_with_batch_location(task):
    data, _, teacher = task
    bad = replace(data, x_train=data.x_train.copy())
    bad.x_train[3, 0] = np.nan
    with pytest.raises(FloatingPointError, match="batch"):
        train_cfq(teacher, bad, replace(FAST, epochs=1))


def test_baselines(task):
    data, te, teacher = task
    fp, _ = baseline_train(teacher, data, "fp32")
    with torch.no_grad():
        assert torch.equal(fp(te.rows, "quantized"), teacher(te.rows))
    cfg = replace(FAST, epochs=1)
    lsq, _ = baseline_train(teacher, data, "lsq-uniform", cfg, bits=4)
    assert lsq.deployed_bits() == [4, 4]
    pact, _ = baseline_train(teacher, data, "pact-uniform", cfg, bits=4)
    assert pact.attachments[0].quantize_activations
    mp, _ = baseline_train(teacher, data, "mixedprec-accuracy", cfg)
    assert bit_cost(mp.deployed_bits(), mp.layer_sizes()) <= 4.0 * sum(mp.layer_sizes())
    with pytest.raises(ValueError):
        baseline_train(teacher, data, "nope")


def test_uniform_bits_for_budget():
    assert uniform_bits_for_budget([10, 10], (2, 3, 4, 8), 4.0) == 4
    assert uniform_bits_for_budget([10, 10], (2, 3, 4, 8), 7.9) == 4
    with pytest.raises(ValueError):
        uniform_bits_for_budget([10], (2, 4), 1.0)


def test_config_validation_and_roundtrip():
    cfg = CfqConfig(eta=0.5, fixed_bits=(4, 8))
    assert CfqConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for kw in ({"eta": -1}, {"validity_scope": "some"}, {"hinge_on": True, "gamma": 0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            CfqConfig(**kw)


def test_sweep_picks_best_within_budget(task):
    data, _, teacher = task
    res = sweep_hyperparams(teacher, data, replace(FAST, epochs=1), etas=(0.5, 1.0), lams=(1e-4,))
    assert len(res.table) == 2 and res.met_budget
    best = max(res.table, key=lambda r: r["val_accuracy"])
    assert res.best.eta == best["eta"]
