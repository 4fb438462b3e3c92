"""Acceptance criteria, each at its stated tolerance.

The downstream criteria share one reference distillation (2000 steps) and one
set of PER / PER+CTA finetunes over five seeds. The whole module takes
roughly 15 minutes on one core.
"""

import time

import numpy as np
import pytest

from vexpert import analysis, config
from vexpert.analysis import knn_entropy, knn_mutual_information
from vexpert.backbone import VERModel
from vexpert.cli import main
from vexpert.losses import mi_loss
from vexpert.runs import analysis_pool, build_world, finetune_from, run_distill, utilization_seed_variance
from vexpert.task import selection_frequencies

import gradient_cases
from test_losses import mi_oracle_error
from test_moe import dense_max_diff
from test_routing import cta_mismatches, gumbel_contract

pytestmark = pytest.mark.slow

SEEDS = range(5)


# ------------------------------------------------------------ shared fixtures


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    cfg = config.defaults().replace(**{"run.out_dir": str(tmp_path_factory.mktemp("reference"))})
    world = build_world(cfg)
    t0 = time.perf_counter()
    result = run_distill(cfg, world)
    return cfg, world, result, time.perf_counter() - t0


@pytest.fixture(scope="module")
def per_runs(reference):
    """Eval-mode expert utilization and, with annealing, per-patch MI maps for every seed."""
    cfg, world, result, _ = reference
    pool = analysis_pool(cfg, world)
    out = {False: [], True: []}
    for cta in (False, True):
        for seed in SEEDS:
            c = cfg.replace(**{"routing.strategy": "per", "routing.cta": cta}).with_seed(seed)
            run = finetune_from(c, result.model, world)
            util = selection_frequencies(run, world.task, cfg.task.n_eval, seed)[1]
            mi = None
            if cta:
                a = cfg.analysis
                mi = analysis.per_patch_mi_before_after(run, pool, fraction=a.fraction, seed=seed, k=a.k,
                                                        n_components=a.n_components, grid=world.source.grid)
            out[cta].append((util, mi))
    return out


# ------------------------------------------------------------------ criteria


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(10):
        for name, err in gradient_cases.all_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 120
    assert criterion("gradient suite", ok, f"{len(worst)} cases x 10 seeds, worst {name} {err:.2e}, "
                                           f"{elapsed:.1f}s")


def test_dense_equivalence(criterion):
    worst = max(dense_max_diff(seed) for seed in range(100))
    assert criterion("dense equivalence at K=L", worst < 1e-9, f"100 configs, max abs diff {worst:.2e}")


def test_annealing_exhaustive(criterion):
    bad = cta_mismatches()
    assert criterion("annealing schedule exhaustive grid", bad == 0, f"{bad} mismatches")


def test_mi_oracle(criterion):
    worst = max(mi_oracle_error(seed) for seed in range(1000))
    disjoint = []
    for N, I in [(1, 3), (1, 2), (2, 3), (3, 5)]:
        cond = np.zeros((N, I, I))
        cond[:, np.arange(I), np.arange(I)] = 1.0
        disjoint.append(abs(mi_loss(cond).item() + N * np.log(I)))
    example = mi_loss(np.eye(3)[None]).item()
    ok = worst < 1e-9 and max(disjoint) < 1e-9
    assert criterion("MI loss oracle", ok, f"1000 tables max err {worst:.1e}, disjoint err {max(disjoint):.1e}, "
                                          f"I=3,N=1 -> {example:.4f}")


def test_gumbel_contract(criterion):
    one_hot, st_err, freq_err = gumbel_contract(0, n_draws=10_000)
    ok = one_hot and st_err < 1e-6 and freq_err <= 0.02
    assert criterion("Gumbel selection contract", ok,
                     f"one-hot {one_hot}, straight-through rel err {st_err:.1e}, max |freq - pi| {freq_err:.4f}")


def test_desk_scale_distillation(reference, criterion):
    cfg, _, result, elapsed = reference
    before, after = np.array(result.initial["cos"]), np.array(result.final["cos"])
    reduction = 1 - after / before
    mi0, mi1 = result.initial["mi"], result.final["mi"]
    ok = (reduction >= 0.5).all() and elapsed < 600 and mi1 < mi0 and len(result.metrics) <= 2000
    assert criterion("desk-scale distillation", ok,
                     f"cos {np.round(before, 3)} -> {np.round(after, 3)} (reduction {np.round(reduction, 3)}), "
                     f"MI {mi0:.4f} -> {mi1:.4f}, {len(result.metrics)} steps in {elapsed:.0f}s")


def test_framewise_routing_selects_relevant_teacher(reference, criterion):
    cfg, world, result, _ = reference
    r = cfg.task.relevant_teacher
    freqs = []
    for seed in SEEDS:
        c = cfg.replace(**{"routing.strategy": "ftr"}).with_seed(seed)
        run = finetune_from(c, result.model, world)
        tf, _ = selection_frequencies(run, world.task, cfg.task.n_eval, seed)
        freqs.append(float(tf[:, r].min()))
    wins = sum(f > 0.9 for f in freqs)
    assert criterion("framewise routing picks relevant teacher", wins >= 4,
                     f"teacher {r} frequency per seed {np.round(freqs, 3)}, {wins}/5 above 0.9")


def test_annealing_reduces_seed_variance(per_runs, criterion):
    plain = utilization_seed_variance([u for u, _ in per_runs[False]])
    annealed = utilization_seed_variance([u for u, _ in per_runs[True]])
    assert criterion("annealing lowers utilization variance across seeds", annealed < plain,
                     f"PER {plain:.3e} vs PER+CTA {annealed:.3e}")


def test_irrelevant_patch_suppression(reference, per_runs, criterion):
    _, world, _, _ = reference
    mask = world.task.mask
    pairs = [(mi.ravel()[~mask].mean(), mi.ravel()[mask].mean()) for _, mi in per_runs[True]]
    wins = sum(noise < rel for noise, rel in pairs)
    detail = ", ".join(f"{n:.2f}<{r:.2f}" if n < r else f"{n:.2f}>={r:.2f}" for n, r in pairs)
    assert criterion("noise patches keep less information", wins >= 4, f"noise vs relevant MI: {detail}; "
                                                                        f"{wins}/5")


def test_estimator_calibration(criterion):
    rng = np.random.default_rng(0)
    errors = []
    for rho in (0.0, 0.5, 0.9):
        xy = rng.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=5000)
        est = knn_mutual_information(xy[:, 0], xy[:, 1], k=3, seed=1).value
        errors.append(abs(est + 0.5 * np.log(1 - rho**2)))
    h = knn_entropy(rng.standard_normal(5000), k=3, seed=2)
    h_err = abs(h - 0.5 * np.log(2 * np.pi * np.e))
    ok = max(errors) <= 0.05 and h_err <= 0.05
    assert criterion("estimator calibration", ok,
                     f"MI errors {np.round(errors, 4)} (rho 0, 0.5, 0.9), entropy error {h_err:.4f}")


def test_router_budget(criterion):
    model = VERModel(config.defaults().model_config(), 0)
    total = model.num_parameters()
    router = model.attach_patch_router(np.random.default_rng(0)).num_parameters()
    share = router / total
    assert criterion("patchwise router budget", share < 0.004,
                     f"{router} router / {total} model parameters = {100 * share:.3f}%")


def test_reproducibility(tmp_path, criterion):
    """Two runs of the same (config, seed) through the CLI produce identical bytes."""
    files = {}
    for name in ("first", "second"):
        out = tmp_path / name
        common = ["--seed", "3", "--run.out_dir", str(out), "--distill.steps", "40", "--finetune.steps", "20",
                  "--task.n_eval", "32", "--analysis.pool_size", "200"]
        assert main(["distill", *common]) == 0
        ckpt = out / "distill" / "seed3" / "model.ckpt"
        assert main(["finetune", *common, "--checkpoint", str(ckpt), "--routing.cta", "true",
                     "--analysis.enabled", "true"]) == 0
        assert main(["finetune", *common, "--checkpoint", str(ckpt), "--routing.strategy", "ftr"]) == 0
        files[name] = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*"))
                       if p.suffix in (".csv", ".ckpt", ".pgm")}
    same = files["first"] == files["second"] and len(files["first"]) > 5
    assert criterion("bit-identical reruns", same, f"{len(files['first'])} metrics, checkpoint and map files")
