import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cfq.data import CostSpec, action_cost
from cfq.nn import ModelGraph
from cfq.recourse import (ActionSet, SolverConfig, exact_linear_recourse, gradient_recourse, is_feasible,
                          pgd_recourse, project, project_ste, solve_recourse, teacher_actions)

from conftest import central_diff, linear_model, random_action_instance, rel_err


def test_projection_examples():
    aset = ActionSet(np.array([True, False]), np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(project(np.array([0.3, 0.7]), np.array([0.5, 0.5]), aset), [0.0, 0.5])
    onehot = ActionSet(np.zeros(3, bool), np.zeros(3), np.ones(3), None, ((0, 1, 2),))
    np.testing.assert_array_equal(project(np.array([-0.8, 0.9, 0.1]), np.array([1.0, 0, 0]), onehot), [-1, 1, 0])
    sparse = ActionSet.box([-9] * 4, [9] * 4, k=2)
    np.testing.assert_array_equal(project(np.array([0.1, -3, 2, 2]), np.zeros(4), sparse), [0, -3, 2, 0])
    ordinal = ActionSet(np.zeros(1, bool), np.array([1.0]), np.array([3.0]), None, (),
                        ((0, np.array([1.0, 2.0, 3.0])),))
    np.testing.assert_array_equal(project(np.array([0.4]), np.array([1.0]), ordinal), [0.0])
    np.testing.assert_array_equal(project(np.array([0.6]), np.array([1.0]), ordinal), [1.0])
    with pytest.raises(ValueError):
        project(np.zeros(3), np.zeros(2), aset)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_projection_is_feasible_and_idempotent(seed):
    x, delta, aset = random_action_instance(np.random.default_rng(seed))
    p = project(delta, x, aset)
    assert is_feasible(p, x, aset)
    assert np.array_equal(project(p, x, aset), p)


def test_projection_batches_match_single_rows():
    rng = np.random.default_rng(0)
    x, _, aset = random_action_instance(rng)
    deltas = rng.normal(size=(20, len(x)))
    batch = project(deltas, np.tile(x, (20, 1)), aset)
    for i in range(20):
        np.testing.assert_array_equal(batch[i], project(deltas[i], x, aset))


def test_projection_ste_gradient_masks_inactive_coordinates():
    aset = ActionSet(np.array([True, False, False, False]), -np.ones(4), np.ones(4), k=2)
    x = torch.zeros(4, dtype=torch.float64)
    delta = torch.tensor([0.5, 2.0, 0.3, 0.1], dtype=torch.float64, requires_grad=True)
    out = project_ste(delta, x, aset)
    np.testing.assert_array_equal(out.detach().numpy(), [0, 1, 0.3, 0])
    out.sum().backward()
    # immutable, clamped and sparsified coordinates carry no gradient
    np.testing.assert_array_equal(delta.grad.numpy(), [0, 0, 1, 0])


def test_one_dimensional_recourse_hits_boundary():
    model = linear_model([3.0])
    aset = ActionSet.box([-5], [5])
    res = pgd_recourse(model, np.array([-0.5]), 1, aset, SolverConfig(restarts=1))
    assert res.success and res.label == 1
    assert res.delta[0] == pytest.approx(0.5, abs=1e-5)


def test_immutable_direction_means_failure():
    model = linear_model([1.0, 0.0])
    aset = ActionSet.box([-5, -5], [5, 5], immutable=[0])
    res = pgd_recourse(model, np.array([-1.0, 0.0]), 1, aset, SolverConfig(restarts=2, steps=50))
    assert not res.success
    assert res.delta[0] == 0.0


def test_already_favorable_point_needs_no_action():
    model = linear_model([1.0, 1.0])
    res = pgd_recourse(model, np.array([2.0, 2.0]), 1, ActionSet.box([-5, -5], [5, 5]))
    assert res.success and res.cost == 0.0


def test_exact_oracle_examples():
    aset = ActionSet.box([-5, -5], [5, 5])
    res = exact_linear_recourse([1.0, 1.0], 0.0, np.array([-1.0, 0.0]), aset, CostSpec.uniform(2))
    assert res.success and res.cost == pytest.approx(1.0, abs=1e-3)
    # cheaper coordinate is used when costs differ
    res = exact_linear_recourse([1.0, 1.0], 0.0, np.array([-1.0, 0.0]), aset, CostSpec(np.array([3.0, 1.0])))
    assert res.cost == pytest.approx(1.0, abs=1e-3) and abs(res.delta[0]) < 1e-3
    with pytest.raises(ValueError):
        exact_linear_recourse(np.ones(9), 0.0, np.zeros(9), ActionSet.box([-1] * 9, [1] * 9))


@pytest.mark.parametrize("p", [1, 2])
def test_solver_matches_exact_oracle_on_random_linear_instances(p):
    rng = np.random.default_rng(10 + p)
    for _ in range(8):
        d = int(rng.integers(2, 5))
        w = rng.normal(size=d)
        b0 = float(rng.normal())
        x = rng.uniform(-1, 1, d)
        if w @ x + b0 > 0:
            x = -x - 2 * b0 * w / (w @ w)
        imm = [int(rng.integers(d))] if rng.random() < 0.5 else []
        aset = ActionSet.box([-3] * d, [3] * d, immutable=imm, k=int(rng.integers(1, d + 1)))
        cost = CostSpec(rng.uniform(0.5, 2.0, d), p)
        oracle = exact_linear_recourse(w, b0, x, aset, cost)
        res = solve_recourse(linear_model(w, b0), x[None], [1], aset, SolverConfig(restarts=4), "fp", cost)[0]
        assert res.success == oracle.success
        if oracle.success:
            assert is_feasible(res.delta, x, aset)
            assert res.cost <= oracle.cost * 1.1 + 1e-9


def test_gradient_rule_matches_hand_unrolled_steps():
    model = ModelGraph([3, 4, 2], seed=3)
    aset = ActionSet.box([-2] * 3, [2] * 3)
    x = np.array([[0.1, -0.2, 0.3]])
    cfg = SolverConfig.teacher(steps=3, step_size=0.2)
    got = gradient_recourse(model, x, [1], aset, cfg).numpy()
    delta = np.zeros((1, 3))
    for _ in range(3):
        u = torch.tensor(x + delta, requires_grad=True)
        loss = torch.nn.functional.cross_entropy(model(u), torch.tensor([1]), reduction="sum")
        (g,) = torch.autograd.grad(loss, u)
        delta = project(delta - 0.2 * g.numpy(), x, aset)
    np.testing.assert_allclose(got, delta, rtol=1e-12, atol=1e-14)


def test_student_actions_carry_parameter_gradients():
    model = ModelGraph([3, 4, 2], seed=4)
    aset = ActionSet.box([-5] * 3, [5] * 3)
    x = np.array([[0.2, -0.1, 0.4], [0.0, 0.3, -0.2]])
    cfg = SolverConfig.student(steps=2, step_size=0.3)
    c = np.array([[1.0, -2.0, 0.5], [0.3, 0.2, -1.0]])
    w = model.weights[1]
    dq = gradient_recourse(model, x, [1, 1], aset, cfg, create_graph=True)
    (torch.tensor(c) * dq).sum().backward()
    base = w.detach().numpy().copy()

    def f(v):
        with torch.no_grad():
            w.copy_(torch.tensor(v))
        out = float((c * gradient_recourse(model, x, [1, 1], aset, cfg).numpy()).sum())
        with torch.no_grad():
            w.copy_(torch.tensor(base))
        return out

    assert rel_err(w.grad.numpy(), central_diff(f, base)) < 1e-4


def test_teacher_actions_are_detached_and_noise_is_reproducible():
    model = ModelGraph([3, 2], seed=1)
    aset = ActionSet.box([-5] * 3, [5] * 3)
    x = np.zeros((4, 3))
    clean = teacher_actions(model, x, [1] * 4, aset, SolverConfig.teacher())
    assert not clean.requires_grad
    cfg = SolverConfig.teacher(teacher_noise=0.05)
    a = teacher_actions(model, x, [1] * 4, aset, cfg, torch.Generator().manual_seed(0))
    b = teacher_actions(model, x, [1] * 4, aset, cfg, torch.Generator().manual_seed(0))
    assert torch.equal(a, b) and not torch.equal(a, clean)


def test_solver_respects_sparsity_and_categorical_constraints():
    rng = np.random.default_rng(5)
    model = ModelGraph([6, 8, 2], seed=6)
    groups = ((3, 4, 5),)
    aset = ActionSet(np.array([True, False, False, False, False, False]), np.array([-3, -3, -3, 0, 0, 0.0]),
                     np.array([3, 3, 3, 1, 1, 1.0]), 2, groups)
    x = np.concatenate([rng.uniform(-1, 1, (10, 3)), np.eye(3)[rng.integers(0, 3, 10)]], axis=1)
    res = solve_recourse(model, x, np.ones(10, dtype=int), aset, SolverConfig(restarts=2, steps=100))
    for i in range(10):
        assert is_feasible(res.delta[i], x[i], aset)
    assert np.all(res.cost == action_cost(res.delta, CostSpec.uniform(6)))


def test_solver_config_validation():
    for kw in ({"steps": 0}, {"step_size": 0}, {"restarts": 0}, {"rule": "adam"}, {"surrogate": "hinge"}):
        with pytest.raises(ValueError):
            SolverConfig(**kw)
    assert SolverConfig(target_margin=0.3).stop_margin == 0.3
    assert SolverConfig().stop_margin == 1e-6
