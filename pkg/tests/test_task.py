import numpy as np
import pytest

from vexpert.backbone import FTR, LTR, PER, TS, state_dict
from vexpert.data import patchify
from vexpert.errors import ContractError
from vexpert.moe import DFM, TFS
from vexpert.routing import CTASchedule
from vexpert.task import (PolicyHead, SyntheticTask, active_parameter_count, evaluate, finetune_router, mix_experts,
                          selection_frequencies)

import gradient_cases


@pytest.fixture(scope="module")
def world():
    model, bank, source = gradient_cases.tiny_world(0)
    task = SyntheticTask(bank, source, 1, seed=0, n_relevant=2, specific_components=3, n_calibration=512)
    return model, task


def test_oracle_solves_task(world):
    _, task = world
    assert evaluate(task.oracle, task, 128) == 1.0


def test_zero_policy_mostly_fails(world):
    _, task = world
    assert evaluate(lambda x: np.zeros((len(x), task.target_dim)), task, 256) < 0.5


def test_target_ignores_irrelevant_patches(world):
    _, task = world
    images, targets = task.sample(np.random.default_rng(0), 8)
    p = patchify(images, task.source.patch)
    p[:, ~task.mask] = np.random.default_rng(1).standard_normal(p[:, ~task.mask].shape)
    np.testing.assert_allclose(task.target_from_patches(p), targets, atol=1e-12)
    assert len(task.relevant_patches) == 2


def test_targets_are_standardised(world):
    _, task = world
    _, t = task.sample(np.random.default_rng(2), 4000)
    np.testing.assert_allclose(t.mean(axis=0), 0, atol=0.1)
    np.testing.assert_allclose(t.std(axis=0), 1, atol=0.1)


def test_sampling_is_deterministic(world):
    _, task = world
    a = task.sample(np.random.default_rng(3), 4)
    b = task.sample(np.random.default_rng(3), 4)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_task_arguments_checked(world):
    model, task = world
    with pytest.raises(ContractError):
        SyntheticTask(task.bank, task.source, 2)
    with pytest.raises(ContractError):
        SyntheticTask(task.bank, task.source, 1, n_relevant=5, n_calibration=64)
    with pytest.raises(ContractError):
        SyntheticTask(task.bank, task.source, 1, n_relevant=2, specific_components=9, n_calibration=64)


def test_specific_readout_is_less_predictable_from_other_teachers(world):
    _, task = world
    random = SyntheticTask(task.bank, task.source, 1, seed=0, n_relevant=2, specific_components=None,
                           n_calibration=512)
    clean, _ = task._draw(np.random.default_rng(4), 2000)
    other = task._pooled(0, clean)
    basis = np.c_[other, np.ones(len(other))]

    def r2(t):
        resid = t - basis @ np.linalg.lstsq(basis, t, rcond=None)[0]
        return 1 - resid.var(axis=0).sum() / t.var(axis=0).sum()

    assert r2(task._raw(clean)) < r2(random._raw(clean))


def test_policy_head_starts_at_zero():
    head = PolicyHead(8, 4, 2, np.random.default_rng(0))
    out = head(np.random.default_rng(1).standard_normal((3, 4, 8)))
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("strategy", [TS(0), FTR, LTR, PER])
def test_finetune_freezes_backbone(world, strategy):
    model, task = world
    before = state_dict(model)
    run = finetune_router(model, task, strategy, steps=3, seed=0, batch_size=4)
    assert run.frozen_unchanged and len(run.metrics) == 3
    for name, arr in state_dict(model).items():
        np.testing.assert_array_equal(arr, before[name], err_msg=name)


def test_finetune_is_reproducible(world):
    model, task = world
    a = finetune_router(model, task, PER, steps=4, seed=2, batch_size=4)
    b = finetune_router(model, task, PER, steps=4, seed=2, batch_size=4)
    assert [m["loss"] for m in a.metrics] == [m["loss"] for m in b.metrics]
    c = finetune_router(model, task, PER, steps=4, seed=3, batch_size=4)
    assert [m["loss"] for m in a.metrics] != [m["loss"] for m in c.metrics]


def test_finetune_records_annealed_k(world):
    model, task = world
    run = finetune_router(model, task, PER, CTASchedule(3, 1, 4), steps=6, batch_size=2)
    assert [m["K"] for m in run.metrics] == [3, 2, 2, 1, 1, 1]


def test_cta_only_with_patch_routing(world):
    model, task = world
    with pytest.raises(ContractError):
        finetune_router(model, task, FTR, CTASchedule(3, 1, 4), steps=1)


def test_selection_frequencies_are_distributions(world):
    model, task = world
    run = finetune_router(model, task, FTR, steps=2, batch_size=2)
    tf, ef = selection_frequencies(run, task, 32)
    assert tf.shape == (2, 2) and ef.shape == (2, 3)
    np.testing.assert_allclose(tf.sum(axis=1), 1.0)
    np.testing.assert_allclose(ef.sum(axis=1), 1.0)


def test_mix_experts(world):
    model, _ = world
    mixed = mix_experts(model, 1, 2, seed=0)
    for blk in mixed.vel:
        assert [e.origin for e in blk.moe.experts] == [DFM, TFS, TFS]
        assert blk.moe.gates == {} and blk.moe.k == 2
    assert all(b.moe.n_experts == 3 and "ts0" in b.moe.gates for b in model.vel)
    np.testing.assert_array_equal(mixed.vel[0].moe.experts[0].fc1.weight.data,
                                  model.vel[0].moe.experts[0].fc1.weight.data)
    only_new = mix_experts(model, 0, 1)
    assert only_new.vel[0].moe.k == 1
    with pytest.raises(ContractError):
        mix_experts(model, 0, 0)
    with pytest.raises(ContractError):
        mix_experts(model, 4, 0)


def test_tfs_experts_train_and_dfm_do_not(world):
    model, task = world
    mixed = mix_experts(model, 1, 1)
    run = finetune_router(mixed, task, PER, steps=2, batch_size=2)
    dfm, tfs = run.model.vel[0].moe.experts
    np.testing.assert_array_equal(dfm.fc1.weight.data, mixed.vel[0].moe.experts[0].fc1.weight.data)
    assert not np.array_equal(tfs.fc2.weight.data, mixed.vel[0].moe.experts[1].fc2.weight.data)
    assert run.frozen_unchanged


def test_active_parameter_count_grows_by_one_expert(world):
    model, _ = world
    per_expert = model.vel[0].moe.experts[0].num_parameters()
    counts = [active_parameter_count(model, k) for k in (1, 2, 3)]
    assert np.diff(counts).tolist() == [per_expert * len(model.vel)] * 2
