"""Experiment drivers: distillation, robot-phase finetuning, ablation grids, analysis."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .autodiff import Tape
from .backbone import (FTR, LTR, PER, TS, VERModel, encode_checkpoint, load_state, read_checkpoint,
                       state_dict)
from .config import serialize
from .data import ImageSource, substream
from .errors import ContractError
from .fileio import atomic_write, write_csv
from .losses import pretrain_terms
from .nn import Adam
from .routing import FRAMEWISE, LAYERWISE, CTASchedule, cta_k
from .schedule import LRSchedule
from .task import (FinetuneRun, PolicyHead, SyntheticTask, active_parameter_count, evaluate,
                   finetune_router, mix_experts, selection_frequencies)
from .teachers import TeacherBank

ABLATION_KINDS = ("topk", "routing-strategy", "dfm-tfs", "cta")
HEAD_PREFIX = "policy_head."


# ------------------------------------------------------------------- world


@dataclass
class World:
    """The synthetic image source, teacher bank and downstream task of a config."""

    source: ImageSource
    bank: TeacherBank
    task: SyntheticTask


def build_world(cfg):
    m, t = cfg.model, cfg.teachers
    seed = cfg.run.source_seed
    source = ImageSource(seed, m.image_size, m.channels, m.patch_size)
    bank = TeacherBank.build(seed, tuple(t.kinds), tuple(t.dims), m.patch_size, m.channels, source.grid)
    tk = cfg.task
    task = SyntheticTask(bank, source, tk.relevant_teacher, seed=seed, n_relevant=tk.n_relevant,
                         target_dim=tk.target_dim, threshold=tk.threshold,
                         specific_components=tk.specific_components)
    return World(source, bank, task)


def _out(cfg, *parts):
    path = os.path.join(cfg.run.out_dir, *parts)
    os.makedirs(path, exist_ok=True)
    return path


# --------------------------------------------------------------- distillation


@dataclass
class DistillResult:
    model: VERModel
    metrics: list
    initial: dict
    final: dict
    paths: dict = field(default_factory=dict)


def distill_eval(model, world, cfg, n=64):
    """Eval-mode per-teacher cosine losses and MI loss on a fixed held-out batch."""
    images = world.source.sample(substream(cfg.run.source_seed, "distill-eval"), n)
    terms = pretrain_terms(model, images, world.bank.targets(images), cfg.distill_config(), train_mode=False)
    return {"cos": [c.item() for c in terms["cos"]], "mi": terms["mi"].item(),
            "distill": terms["distill"].item()}


def run_distill(cfg, world=None, write=True):
    """Train backbone, experts, teacher-specific gates and heads on the synthetic teachers."""
    world = world or build_world(cfg)
    seed = cfg.run.seed
    model = VERModel(cfg.model_config(), seed)
    dcfg = cfg.distill_config()
    d = cfg.distill
    sched = LRSchedule(d.steps, d.peak_lr, d.warmup_fraction, d.constant_fraction)
    opt = Adam(model.parameters(), lr=d.peak_lr)
    data_rng, noise_rng = substream(seed, "data"), substream(seed, "gate-noise")
    initial = distill_eval(model, world, cfg)
    metrics = []
    for step in range(d.steps):
        images = world.source.sample(data_rng, d.batch_size)
        with Tape() as tape:
            terms = pretrain_terms(model, images, world.bank.targets(images), dcfg, True, noise_rng)
            tape.backward(terms["loss"])
        lr = sched(step)
        opt.step(lr)
        opt.zero_grad()
        metrics.append({"step": step, "lr": lr, "loss": terms["loss"].item(),
                        "distill": terms["distill"].item(), "mi": terms["mi"].item(),
                        "cos": [c.item() for c in terms["cos"]]})
    result = DistillResult(model, metrics, initial, distill_eval(model, world, cfg))
    if write:
        out = _out(cfg, "distill", f"seed{seed}")
        result.paths = {"checkpoint": os.path.join(out, "model.ckpt"),
                        "metrics": os.path.join(out, "metrics.csv"),
                        "eval": os.path.join(out, "eval.csv"),
                        "config": os.path.join(out, "config.ini")}
        atomic_write(result.paths["checkpoint"], encode_checkpoint(state_dict(model)))
        n_t = len(world.bank)
        write_csv(result.paths["metrics"],
                  ["step", "lr", "loss", "distill", "mi"] + [f"cos_{i}" for i in range(n_t)],
                  [[m["step"], m["lr"], m["loss"], m["distill"], m["mi"], *m["cos"]] for m in metrics])
        write_csv(result.paths["eval"], ["phase", "distill", "mi"] + [f"cos_{i}" for i in range(n_t)],
                  [[ph, r["distill"], r["mi"], *r["cos"]] for ph, r in (("initial", initial), ("final", result.final))])
        atomic_write(result.paths["config"], serialize(cfg))
    return result


def load_distilled(cfg, checkpoint):
    """Fresh model of ``cfg``'s shape holding the parameters in ``checkpoint``."""
    model = VERModel(cfg.model_config(), cfg.run.seed)
    state = read_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    load_state(model, state)
    return model


# ------------------------------------------------------------------ finetune


@dataclass
class FinetuneResult:
    run: object
    success: float
    teacher_freq: np.ndarray
    expert_freq: np.ndarray
    paths: dict = field(default_factory=dict)


def _robot_model(cfg, model):
    f = cfg.finetune
    if (f.n_dfm, f.n_tfs) != (model.vel[0].moe.n_experts, 0):
        model = mix_experts(model, f.n_dfm, f.n_tfs, cfg.run.seed)
    return model


def _cta(cfg, model):
    return cfg.cta_schedule(model.vel[0].moe.n_experts)


def finetune_from(cfg, model, world, strategy=None, cta="config", k="config", seed=None):
    """Finetune a router on ``model`` following ``cfg``; keyword overrides serve the ablations."""
    f = cfg.finetune
    seed = cfg.run.seed if seed is None else seed
    strategy = cfg.strategy() if strategy is None else strategy
    model = _robot_model(cfg, model)
    if cta == "config":
        cta = _cta(cfg, model)
    if k == "config":
        k = cfg.routing.k or None
    schedule = LRSchedule(f.steps, f.lr) if f.schedule == "cosine" else None
    return finetune_router(model, world.task, strategy, cta, steps=f.steps, seed=seed, lr=f.lr,
                           batch_size=f.batch_size, k=k, lr_schedule=schedule,
                           router_lr_scale=f.router_lr_scale)


def _finetune_rows(run, n_teachers, n_experts):
    teacherwise = run.strategy.kind in ("ts", "ftr", "ltr")
    header = ["step", "loss", "K"]
    header += [f"teacher_freq_{i}" for i in range(n_teachers)] if teacherwise else []
    header += [f"expert_freq_{j}" for j in range(n_experts)]
    rows = []
    for m in run.metrics:
        row = [m["step"], m["loss"], m["K"]]
        row += [float(x) for x in m["teacher_freq"]] if teacherwise else []
        rows.append(row + [float(x) for x in m["expert_freq"]])
    return header, rows


def run_finetune(cfg, checkpoint, world=None, write=True):
    world = world or build_world(cfg)
    model = load_distilled(cfg, checkpoint) if not isinstance(checkpoint, VERModel) else checkpoint
    run = finetune_from(cfg, model, world)
    seed = cfg.run.seed
    n_eval = cfg.task.n_eval
    tf, ef = selection_frequencies(run, world.task, n_eval, seed)
    result = FinetuneResult(run, evaluate(run, world.task, n_eval, seed), tf, ef)
    if not run.frozen_unchanged:
        raise ContractError("frozen parameters changed during finetuning")
    if write:
        out = _out(cfg, "finetune", f"{run.strategy.label}{'+cta' if run.cta else ''}", f"seed{seed}")
        p = result.paths
        p["metrics"] = os.path.join(out, "metrics.csv")
        p["checkpoint"] = os.path.join(out, "finetuned.ckpt")
        p["summary"] = os.path.join(out, "summary.csv")
        p["config"] = os.path.join(out, "config.ini")
        n_exp = run.model.vel[0].moe.n_experts
        write_csv(p["metrics"], *_finetune_rows(run, len(world.bank), n_exp))
        state = state_dict(run.model)
        state.update({HEAD_PREFIX + n: a.data.copy() for n, a in run.head.named_parameters()})
        atomic_write(p["checkpoint"], encode_checkpoint(state))
        summary = [["success_rate", result.success], ["final_loss", _tail_loss(run)]]
        summary += [[f"teacher_freq_layer{n}_teacher{i}", float(tf[n, i])]
                    for n in range(tf.shape[0]) for i in range(tf.shape[1])]
        write_csv(p["summary"], ["metric", "value"], summary)
        atomic_write(p["config"], serialize(cfg))
        if cfg.analysis.enabled:
            p.update(write_analysis(cfg, run, world, out))
    return result


def _tail_loss(run, window=50):
    return float(np.mean([m["loss"] for m in run.metrics[-window:]]))


# ------------------------------------------------------------------ analysis


def analysis_pool(cfg, world):
    """The fixed evaluation 'dataset' that per-patch analyses subsample."""
    images, _ = world.task.sample(substream(cfg.run.source_seed, "analysis-pool"), cfg.analysis.pool_size)
    return images


def write_analysis(cfg, run, world, out):
    """Utilization tables, last-layer norm map and per-patch MI map for a finetuned run."""
    a = cfg.analysis
    images = analysis_pool(cfg, world)
    trace = []
    for s in range(0, min(len(images), 512), 128):
        run.features(images[s:s + 128], trace)
    util = analysis.expert_utilization(trace, n_experts=run.model.vel[0].moe.n_experts,
                                       n_teachers=run.model.cfg.n_teachers)
    paths = {"utilization": analysis.save_table(os.path.join(out, "utilization.csv"), util.per_layer)}
    if util.per_teacher is not None:
        paths["utilization_teacher"] = analysis.save_table(
            os.path.join(out, "utilization_by_teacher.csv"), util.per_teacher)
    _, y = analysis.collect_features(run, images[:256])
    grid = world.source.grid
    norms = np.mean([analysis.feature_norm_map(tok, grid) for tok in y], axis=0)
    paths["norm_map"], paths["norm_map_csv"] = analysis.save_map(os.path.join(out, "norm_map"), norms)
    mi = analysis.per_patch_mi_before_after(run, images, fraction=a.fraction, seed=cfg.run.seed, k=a.k,
                                            n_components=a.n_components, grid=grid)
    paths["mi_map"], paths["mi_map_csv"] = analysis.save_map(os.path.join(out, "mi_map"), mi)
    return paths


def load_finetuned(cfg, checkpoint):
    """Rebuild model, router and policy head from a ``run_finetune`` checkpoint."""
    state = read_checkpoint(checkpoint)
    model = _robot_model(cfg, VERModel(cfg.model_config(), cfg.run.seed))
    strategy = cfg.strategy()
    rng = substream(cfg.run.seed, "router-init")
    if strategy.kind == "ftr":
        model.attach_teacher_router(FRAMEWISE, rng)
    elif strategy.kind == "ltr":
        model.attach_teacher_router(LAYERWISE, rng)
    elif strategy.kind == "per":
        model.attach_patch_router(rng)
    head = PolicyHead(model.cfg.dim, model.cfg.n_patches, cfg.task.target_dim, rng)
    load_state(model, {n: v for n, v in state.items() if not n.startswith(HEAD_PREFIX)})
    load_state(head, {n[len(HEAD_PREFIX):]: v for n, v in state.items() if n.startswith(HEAD_PREFIX)})
    return FinetuneRun(model, head, strategy, _cta(cfg, model), cfg.finetune.steps, cfg.run.seed,
                       cfg.routing.k or None)


def run_analyze(cfg, checkpoint, world=None):
    world = world or build_world(cfg)
    run = load_finetuned(cfg, checkpoint)
    out = _out(cfg, "analysis", f"{run.strategy.label}{'+cta' if run.cta else ''}", f"seed{cfg.run.seed}")
    return write_analysis(cfg, run, world, out)


# ------------------------------------------------------------------ ablations


def _seeds(cfg):
    return [cfg.run.seed + j for j in range(cfg.run.seeds)]


def _summarise(cell, values):
    """Row with mean and standard deviation of each metric over seeds."""
    row = {"cell": cell, "seeds": len(next(iter(values.values())))}
    for name, v in values.items():
        row[f"{name}_mean"] = float(np.mean(v))
        row[f"{name}_std"] = float(np.std(v))
    return row


def _cell_metrics(cfg, world, run):
    return {"success": evaluate(run, world.task, cfg.task.n_eval, run.seed),
            "final_loss": _tail_loss(run)}


def dfm_tfs_grid(n_experts):
    """(n_dfm, n_tfs) mixes: all distilled, two trained from scratch, all distilled plus one new."""
    return ((n_experts, 0), (0, 2), (n_experts, 1))


def ablation_cells(cfg, kind, n_experts):
    """(label, strategy, cta, k, (n_dfm, n_tfs)) for every cell of an ablation grid."""
    L = n_experts
    base = (cfg.finetune.n_dfm, cfg.finetune.n_tfs)
    horizon, k_min = cfg.cta_horizon, cfg.routing.k_min
    if kind == "topk":
        return [(f"K={k}", PER, None, k, base) for k in range(1, L + 1)]
    if kind == "routing-strategy":
        cells = [(f"TS{i}", TS(i), None, None, (L, 0)) for i in range(len(cfg.teachers.kinds))]
        cells += [("FTR", FTR, None, None, (L, 0)), ("LTR", LTR, None, None, (L, 0)),
                  ("PER", PER, None, None, (L, 0)),
                  ("PER+CTA", PER, CTASchedule(L, k_min, horizon), None, (L, 0))]
        return cells
    if kind == "dfm-tfs":
        return [(f"DFM={a},TFS={b}", PER, None, min(cfg.model.top_k, a + b), (a, b)) for a, b in dfm_tfs_grid(L)]
    if kind == "cta":
        return [("PER", PER, None, None, base), ("PER+CTA", PER, "cta", None, base)]
    raise ContractError(f"unknown ablation kind {kind!r}; expected one of {', '.join(ABLATION_KINDS)}")


def run_ablation(cfg, kind, checkpoint, world=None, write=True):
    """Run every cell of ``kind`` over ``cfg.run.seeds`` seeds; one summary row per cell."""
    if kind not in ABLATION_KINDS:
        raise ContractError(f"unknown ablation kind {kind!r}; expected one of {', '.join(ABLATION_KINDS)}")
    world = world or build_world(cfg)
    base = load_distilled(cfg, checkpoint) if not isinstance(checkpoint, VERModel) else checkpoint
    L = base.vel[0].moe.n_experts
    rows = []
    for label, strategy, cta, k, (n_dfm, n_tfs) in ablation_cells(cfg, kind, L):
        cell_cfg = cfg.replace(**{"finetune.n_dfm": n_dfm, "finetune.n_tfs": n_tfs})
        n_exp = n_dfm + n_tfs
        if cta == "cta":
            cta = CTASchedule(n_exp, min(cfg.routing.k_min, n_exp), cfg.cta_horizon)
        values, utils = {}, []
        for seed in _seeds(cfg):
            run = finetune_from(cell_cfg.with_seed(seed), base, world, strategy, cta=cta, k=k, seed=seed)
            for name, v in _cell_metrics(cfg, world, run).items():
                values.setdefault(name, []).append(v)
            final_k = cta_k(cta, cfg.finetune.steps) if cta is not None else (k or run.model.vel[0].moe.k)
            values.setdefault("active_params", []).append(active_parameter_count(run.model, final_k))
            if strategy.kind == "per":
                utils.append(selection_frequencies(run, world.task, cfg.task.n_eval, seed)[1])
        row = _summarise(label, values)
        if len(utils) > 1:
            row["utilization_seed_variance"] = utilization_seed_variance(utils)
        rows.append(row)
    if write:
        out = _out(cfg, "ablation")
        header = list(dict.fromkeys(key for r in rows for key in r))
        write_csv(os.path.join(out, f"{kind}.csv"), header, [[r.get(h, "") for h in header] for r in rows])
    return rows


def utilization_seed_variance(per_seed):
    """Mean over (layer, expert) cells of the across-seed variance of utilization frequencies."""
    return float(np.var(np.stack(per_seed), axis=0).mean())
