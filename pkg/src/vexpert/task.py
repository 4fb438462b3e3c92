"""Synthetic robot-phase proxy: frozen backbone, trainable router and policy head."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from . import autodiff as ad
from .autodiff import Tape
from .backbone import PER, forward_bvt, forward_vel
from .data import patchify, substream, unpatchify
from .errors import ContractError
from .moe import DFM, TFS, add_experts, retain_experts
from .nn import Adam, LayerNorm, Linear, Module, Parameter, mse, parameter_digest
from .routing import FRAMEWISE, LAYERWISE

SUCCESS_THRESHOLD = 0.5


class SyntheticTask:
    """Regress a linear readout of one teacher's features on a subset of patches.

    Relevant patches carry structured content from ``source``; every other
    patch is i.i.d. Gaussian pixel noise, redrawn per sample. The raw target is
    ``readout^T mean_{j in relevant} t_r(x_masked)_j`` where ``x_masked`` zeroes
    the irrelevant patches, so it is an exact function of the relevant patches
    and independent of the noise. Targets are standardised per dimension.

    With ``specific_components=q`` the readout is restricted to the top ``q``
    principal directions of the pooled teacher-r features and, within them,
    picks the directions least linearly predictable from the other teachers.
    Pass ``None`` for a plain random readout.
    """

    def __init__(self, bank, source, relevant_teacher, seed=0, n_relevant=6, target_dim=2,
                 relevant_patches=None, threshold=SUCCESS_THRESHOLD, specific_components=7,
                 n_calibration=4096):
        if not 0 <= relevant_teacher < len(bank):
            raise ContractError(f"relevant teacher {relevant_teacher} outside [0, {len(bank)})")
        self.bank, self.source = bank, source
        self.teacher = relevant_teacher
        self.seed = seed
        self.threshold = threshold
        T = source.n_patches
        rng = substream(seed, "task")
        if relevant_patches is None:
            if not 1 <= n_relevant <= T:
                raise ContractError(f"n_relevant={n_relevant} outside [1, {T}]")
            relevant_patches = np.sort(rng.choice(T, size=n_relevant, replace=False))
        self.mask = np.zeros(T, dtype=bool)
        self.mask[np.asarray(relevant_patches)] = True
        self.target_dim = target_dim
        clean, _ = self._draw(substream(seed, "task-calibration"), n_calibration)
        if specific_components is None:
            D = bank[relevant_teacher].dim
            self.readout = rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, target_dim))
        else:
            self.readout = self._specific_readout(clean, specific_components)
        raw = self._raw(clean)
        self._mu, self._sd = raw.mean(axis=0), raw.std(axis=0)

    def _pooled(self, i, patches):
        return self.bank[i].features_from_patches(patches)[:, self.mask].mean(axis=1)

    def _specific_readout(self, clean, q):
        r = self.teacher
        if not self.target_dim <= q <= self.bank[r].dim:
            raise ContractError(f"specific_components={q} outside [{self.target_dim}, {self.bank[r].dim}]")
        own = self._pooled(r, clean)
        own = own - own.mean(axis=0)
        others = [self._pooled(i, clean) for i in range(len(self.bank)) if i != r]
        if not others:
            raise ContractError("a teacher-specific readout needs at least two teachers")
        basis = np.concatenate(others, axis=1)
        basis = np.c_[basis - basis.mean(axis=0), np.ones(len(basis))]
        resid = own - basis @ np.linalg.lstsq(basis, own, rcond=None)[0]
        pcs = np.linalg.eigh(own.T @ own)[1][:, -q:]
        # generalised eigenproblem: residual variance relative to total variance
        _, vecs = eigh(pcs.T @ resid.T @ resid @ pcs, pcs.T @ own.T @ own @ pcs)
        return pcs @ vecs[:, -self.target_dim:]

    @property
    def relevant_patches(self):
        return np.nonzero(self.mask)[0]

    def _draw(self, rng, n):
        clean = self.source.sample_patches(rng, n)
        clean[:, ~self.mask] = 0.0
        noisy = clean.copy()
        noisy[:, ~self.mask] = rng.standard_normal((n, int((~self.mask).sum()), clean.shape[-1]))
        return clean, noisy

    def _raw(self, masked_patches):
        feats = self.bank[self.teacher].features_from_patches(masked_patches)
        return feats[:, self.mask].mean(axis=1) @ self.readout

    def target_from_patches(self, patches):
        p = np.array(patches, dtype=np.float64)
        p[:, ~self.mask] = 0.0
        return (self._raw(p) - self._mu) / self._sd

    def to_images(self, patches):
        s = self.source
        return unpatchify(patches, s.grid, s.patch, s.channels)

    def sample(self, rng, n):
        """(images, targets) with fresh noise in irrelevant patches."""
        clean, noisy = self._draw(rng, n)
        return self.to_images(noisy), (self._raw(clean) - self._mu) / self._sd

    def oracle(self, images):
        """Direct teacher readout from the observed images."""
        return self.target_from_patches(patchify(images, self.source.patch))


class PolicyHead(Module):
    """Learned softmax pooling over patch positions, LayerNorm, then Linear-GELU-Linear.

    The output layer starts at zero, so every candidate feature source begins
    from the same prediction and the same loss.
    """

    def __init__(self, dim, n_patches, out_dim, rng, hidden=64):
        self.pool_logits = Parameter(np.zeros(n_patches))
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng, std=0.0)

    def __call__(self, y):
        B, T, M = y.shape
        a = ad.softmax(self.pool_logits).reshape(T, 1)
        pooled = ad.matmul(y.transpose(0, 2, 1), a).reshape(B, M)
        return self.fc2(ad.gelu(self.fc1(self.norm(pooled))))


@dataclass
class FinetuneRun:
    model: object
    head: PolicyHead
    strategy: object
    cta: object
    steps: int
    seed: int
    k: int | None
    metrics: list = field(default_factory=list)
    frozen_before: str = ""
    frozen_after: str = ""

    def features(self, images, trace=None):
        """Eval-mode VEL output (B, T, M) under the run's strategy at its final K."""
        with ad.no_grad():
            z = forward_bvt(self.model, images)
            return forward_vel(self.model, z, self.strategy, self.steps, k=self.k, cta=self.cta,
                               trace=trace)

    def predict(self, images, trace=None):
        y = self.features(images, trace)
        with ad.no_grad():
            return self.head(y).data

    def __call__(self, images):
        return self.predict(images)

    @property
    def frozen_unchanged(self):
        return self.frozen_before == self.frozen_after


def mix_experts(model, n_dfm, n_tfs, seed=0):
    """Copy of ``model`` whose MoE layers hold the first ``n_dfm`` distilled experts
    plus ``n_tfs`` new trainable ones. Dropping distilled experts also drops the
    teacher-specific gates, leaving the mix usable with patchwise routing only."""
    if n_dfm < 0 or n_tfs < 0 or n_dfm + n_tfs < 1:
        raise ContractError(f"expert mix ({n_dfm}, {n_tfs}) must contain at least one expert")
    model = copy.deepcopy(model)
    rng = substream(seed, "tfs-init")
    for blk in model.vel:
        moe = blk.moe
        if n_dfm > sum(e.origin == DFM for e in moe.experts):
            raise ContractError(f"model has fewer than {n_dfm} distilled experts per layer")
        retain_experts(moe, n_dfm)
        if n_tfs:
            add_experts(moe, n_tfs, rng)
        moe.k = min(moe.k, moe.n_experts)
    return model


def _prepare(model, strategy, seed):
    rng = substream(seed, "router-init")
    if strategy.kind == "ftr":
        model.attach_teacher_router(FRAMEWISE, rng)
    elif strategy.kind == "ltr":
        model.attach_teacher_router(LAYERWISE, rng)
    elif strategy.kind == "per":
        model.attach_patch_router(rng)
    model.freeze()
    trainable = []
    router = model.router_for(strategy)
    if router is not None:
        trainable += router.unfreeze().parameters()
    for blk in model.vel:
        for e in blk.moe.experts:
            if e.origin == TFS:
                trainable += e.unfreeze().parameters()
    return trainable


def _step_metrics(trace, strategy, n_teachers, n_experts):
    teacher_freq = np.zeros(n_teachers)
    expert_freq = np.zeros(n_experts)
    for rec in trace:
        expert_freq += np.bincount(rec["selected"].ravel(), minlength=n_experts) / rec["selected"].size
        if strategy.kind in ("ftr", "ltr"):
            teacher_freq += np.bincount(np.ravel(rec["teacher"]), minlength=n_teachers) / np.size(rec["teacher"])
        elif strategy.kind == "ts":
            teacher_freq[strategy.teacher] += 1.0
    return teacher_freq / len(trace), expert_freq / len(trace)


def finetune_router(model, task, strategy, cta=None, steps=300, seed=0, lr=1e-3, batch_size=16,
                    k=None, lr_schedule=None, router_lr_scale=1.0):
    """Train a fresh robot router plus policy head on a copy of ``model``.

    Only the router for ``strategy``, any TFS experts and the head receive
    updates; everything else keeps its pretrained values, which the returned
    run verifies through parameter digests.
    """
    if cta is not None and strategy.kind != "per":
        raise ContractError("top-K annealing applies to patchwise expert routing only")
    model = copy.deepcopy(model)
    trainable = _prepare(model, strategy, seed)
    head = PolicyHead(model.cfg.dim, model.cfg.n_patches, task.target_dim, substream(seed, "head-init"))
    frozen = model.backbone_parameters()
    run = FinetuneRun(model, head, strategy, cta, steps, seed, k, frozen_before=parameter_digest(frozen))
    opts = [(Adam(head.parameters(), lr=lr), 1.0)]
    if trainable:
        opts.append((Adam(trainable, lr=lr * router_lr_scale), router_lr_scale))
    data_rng = substream(seed, "data")
    noise_rng = substream(seed, "gumbel" if strategy.kind in ("ftr", "ltr") else "gate-noise")
    n_teachers, n_experts = model.cfg.n_teachers, model.vel[0].moe.n_experts

    for step in range(steps):
        images, targets = task.sample(data_rng, batch_size)
        trace = []
        with Tape() as tape:
            z = forward_bvt(model, images)
            y = forward_vel(model, z, strategy, step, k=k, cta=cta, train_mode=True, rng=noise_rng,
                            trace=trace)
            loss = mse(head(y), ad.Tensor(targets))
            tape.backward(loss)
        for opt, scale in opts:
            opt.step(lr_schedule(step) * scale if lr_schedule is not None else None)
            opt.zero_grad()
        tf, ef = _step_metrics(trace, strategy, n_teachers, n_experts)
        run.metrics.append({"step": step, "loss": loss.item(), "K": trace[0]["k"],
                            "teacher_freq": tf, "expert_freq": ef})
    run.frozen_after = parameter_digest(frozen)
    return run


def evaluate(policy, task, n_episodes=256, seed=0, batch_size=64):
    """Fraction of samples whose RMS error (standardised units) is below the task threshold."""
    rng = substream(seed, "evaluate")
    hits = 0
    remaining = n_episodes
    while remaining > 0:
        n = min(batch_size, remaining)
        images, targets = task.sample(rng, n)
        err = np.sqrt(((policy(images) - targets) ** 2).mean(axis=-1))
        hits += int((err < task.threshold).sum())
        remaining -= n
    return hits / n_episodes


def selection_frequencies(run, task, n_samples=256, seed=0, batch_size=64):
    """Eval-mode teacher and per-layer expert selection frequencies of a finetuned run."""
    rng = substream(seed, "selection")
    cfg = run.model.cfg
    n_exp = run.model.vel[0].moe.n_experts
    teacher = np.zeros((cfg.n_moe, cfg.n_teachers))
    expert = np.zeros((cfg.n_moe, n_exp))
    remaining = n_samples
    while remaining > 0:
        n = min(batch_size, remaining)
        images, _ = task.sample(rng, n)
        trace = []
        run.features(images, trace)
        for rec in trace:
            expert[rec["layer"]] += np.bincount(rec["selected"].ravel(), minlength=n_exp)
            if "teacher" in rec:
                t = np.broadcast_to(rec["teacher"], (n,))
                teacher[rec["layer"]] += np.bincount(t, minlength=cfg.n_teachers)
        remaining -= n
    expert /= expert.sum(axis=1, keepdims=True)
    tsum = teacher.sum(axis=1, keepdims=True)
    teacher = np.divide(teacher, tsum, out=np.zeros_like(teacher), where=tsum > 0)
    return teacher, expert


def active_parameter_count(model, k):
    """Parameters touched per token with ``k`` experts active in every VEL layer
    (embedder, plain blocks, VEL attention/norms, one gate, ``k`` experts)."""
    total = model.embed.num_parameters() + sum(b.num_parameters() for b in model.blocks)
    for blk in model.vel:
        total += blk.ln1.num_parameters() + blk.attn.num_parameters() + blk.ln2.num_parameters()
        gate = blk.moe.gates.get("per") or blk.moe.gates["ts0"]
        total += gate.num_parameters()
        total += k * blk.moe.experts[0].num_parameters()
    return total


def ablate_topk(model, task, k_values, seed=0, steps=300, n_eval=256, **kw):
    """One PER finetune + evaluation per K; rows of (K, success, active parameters)."""
    L = model.vel[0].moe.n_experts
    rows = []
    for kk in k_values:
        if not 1 <= kk <= L:
            raise ContractError(f"K={kk} outside [1, {L}]")
        run = finetune_router(model, task, PER, steps=steps, seed=seed, k=kk, **kw)
        rows.append({"K": kk, "success": evaluate(run, task, n_eval, seed),
                     "active_params": active_parameter_count(run.model, kk),
                     "final_loss": float(np.mean([m["loss"] for m in run.metrics[-20:]]))})
    return rows

