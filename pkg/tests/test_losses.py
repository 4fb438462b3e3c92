import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vexpert.errors import ContractError
from vexpert.losses import DistillConfig, SelectionStats, cosine_loss, mi_loss, pretrain_terms, smooth_l1

import gradient_cases


def brute_force_mi(cond):
    """Mutual information of the joint table p(i, l) = cond[i, l] / I, term by term."""
    I, L = cond.shape
    joint = cond / I
    pi, pl = joint.sum(axis=1), joint.sum(axis=0)
    total = 0.0
    for i in range(I):
        for l in range(L):
            if joint[i, l] > 0:
                total += joint[i, l] * np.log(joint[i, l] / (pi[i] * pl[l]))
    return total


def random_table(rng):
    N, I, L = (int(v) for v in rng.integers(1, 5, size=3))
    cond = rng.dirichlet(np.full(L, 0.5), size=(N, I))
    cond[rng.random(cond.shape) < 0.1] = 0.0  # exercise zero cells
    cond[cond.sum(axis=-1) == 0, 0] = 1.0
    return cond / cond.sum(axis=-1, keepdims=True)


def mi_oracle_error(seed):
    cond = random_table(np.random.default_rng(seed))
    expected = -sum(brute_force_mi(c) for c in cond)
    return abs(mi_loss(SelectionStats(cond)).item() - expected)


@pytest.mark.parametrize("seed", range(50))
def test_mi_loss_matches_brute_force(seed):
    assert mi_oracle_error(seed) < 1e-9


@pytest.mark.parametrize("N,I", [(1, 3), (2, 2), (3, 4)])
def test_disjoint_deterministic_routing(N, I):
    cond = np.zeros((N, I, I + 1))
    for i in range(I):
        cond[:, i, i] = 1.0
    assert abs(mi_loss(cond).item() + N * np.log(I)) < 1e-9


def test_disjoint_example_value():
    assert mi_loss(np.eye(3)[None]).item() == pytest.approx(-1.0986, abs=1e-4)


def test_identical_teachers_give_zero():
    cond = np.tile(np.array([0.2, 0.3, 0.5]), (2, 4, 1))
    assert abs(mi_loss(cond).item()) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_mi_is_bounded(seed):
    cond = random_table(np.random.default_rng(seed))
    N, I, L = cond.shape
    v = -mi_loss(cond).item()
    assert -1e-12 <= v <= N * np.log(min(I, L)) + 1e-12


def test_stats_from_selections_counts():
    stats = SelectionStats.from_selections([[np.array([[0, 1]]), np.array([[1, 1]])]], 3)
    np.testing.assert_allclose(stats.conditional.data, [[[0.5, 0.5, 0], [0, 1, 0]]])
    np.testing.assert_allclose(stats.marginal, [[0.25, 0.75, 0]])


def test_stats_shape_checked():
    with pytest.raises(ContractError):
        SelectionStats(np.ones((2, 3)))


def test_cosine_loss_values():
    a = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    b = np.array([[2.0, 0.0], [0.0, -1.0], [1.0, 0.0]])
    assert cosine_loss(a, b).item() == pytest.approx((0 + 2 + (1 - 1 / np.sqrt(2))) / 3)


def test_smooth_l1_values():
    a, b = np.array([0.5, 3.0, -2.0]), np.zeros(3)
    # quadratic inside delta, linear outside
    assert smooth_l1(a, b, 1.0).item() == pytest.approx((0.125 + 2.5 + 1.5) / 3)


@pytest.mark.parametrize("kw", [{"beta": 1.5}, {"gamma": -1}, {"delta": 0}])
def test_distill_config_validation(kw):
    with pytest.raises(ContractError):
        DistillConfig(**kw)


def test_default_weights_are_uniform():
    assert DistillConfig().weights(3) == (1 / 3,) * 3
    with pytest.raises(ContractError):
        DistillConfig(alpha=(1.0,)).weights(2)


def test_pretrain_terms_combine():
    model, bank, source = gradient_cases.tiny_world(0)
    images = source.sample(np.random.default_rng(0), 2)
    cfg = DistillConfig(gamma=0.1)
    t = pretrain_terms(model, images, bank.targets(images), cfg, train_mode=False)
    assert t["loss"].item() == pytest.approx(t["distill"].item() + 0.1 * t["mi"].item())
    expected = sum(a * (cfg.beta * c.item() + (1 - cfg.beta) * s.item())
                   for a, c, s in zip(cfg.weights(2), t["cos"], t["sl1"]))
    assert t["distill"].item() == pytest.approx(expected)
    assert t["stats"].conditional.shape == (2, 2, 3)
