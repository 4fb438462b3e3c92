"""Distillation, teacher/expert mutual-information and the combined pretraining loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import TS, forward_bvt, forward_vel, project_to_teacher
from .errors import ContractError


@dataclass(frozen=True)
class DistillConfig:
    alpha: tuple | None = None  # None -> 1/I for every teacher
    beta: float = 0.9
    gamma: float = 0.0005
    delta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError("beta must lie in [0, 1]")
        if self.gamma < 0:
            raise ContractError("gamma must be >= 0")
        if self.delta <= 0:
            raise ContractError("delta must be > 0")

    def weights(self, n_teachers):
        if self.alpha is None:
            return (1.0 / n_teachers,) * n_teachers
        if len(self.alpha) != n_teachers:
            raise ContractError(f"{len(self.alpha)} alpha weights for {n_teachers} teachers")
        return tuple(self.alpha)


def cosine_loss(a, b):
    """Mean over rows of ``1 - cos(a_row, b_row)``; ``b`` is a constant target."""
    a = ad.as_tensor(a)
    b = ad.Tensor(b.data if isinstance(b, ad.Tensor) else b)
    if a.shape != b.shape:
        raise ContractError(f"cosine_loss shapes differ: {a.shape} vs {b.shape}")
    dot = ad.sum_(a * b, axis=-1)
    na = ad.clamp_min(ad.sqrt(ad.sum_(ad.square(a), axis=-1)), 1e-12)
    nb = np.maximum(np.sqrt((b.data**2).sum(axis=-1)), 1e-12)
    return ad.mean(1.0 - dot / (na * ad.Tensor(nb)))


def smooth_l1(a, b, delta=1.0):
    a = ad.as_tensor(a)
    b = ad.Tensor(b.data if isinstance(b, ad.Tensor) else b)
    if a.shape != b.shape:
        raise ContractError(f"smooth_l1 shapes differ: {a.shape} vs {b.shape}")
    return ad.mean(ad.smooth_l1_elementwise(a - b, delta))


@dataclass
class SelectionStats:
    """Per-layer conditional expert usage ``p(expert | teacher)``, shape (N, I, L)."""

    conditional: ad.Tensor

    def __post_init__(self):
        self.conditional = ad.as_tensor(self.conditional)
        if self.conditional.ndim != 3:
            raise ContractError("conditional usage must have shape (layers, teachers, experts)")

    @property
    def marginal(self):
        """``p(expert)`` per layer with equal teacher priors, shape (N, L)."""
        return self.conditional.data.mean(axis=1)

    @classmethod
    def from_probs(cls, probs):
        """``probs[n][i]``: gate probabilities (..., L) of teacher i at layer n -> batch means."""
        layers = []
        for per_teacher in probs:
            rows = [ad.mean(p.reshape(-1, p.shape[-1]), axis=0) for p in per_teacher]
            layers.append(ad.stack(rows, axis=0))
        return cls(ad.stack(layers, axis=0))

    @classmethod
    def from_selections(cls, selected, n_experts):
        """Hard counts: ``selected[n][i]`` holds expert indices chosen for teacher i at layer n."""
        table = np.zeros((len(selected), len(selected[0]), n_experts))
        for n, per_teacher in enumerate(selected):
            for i, idx in enumerate(per_teacher):
                counts = np.bincount(np.ravel(idx), minlength=n_experts).astype(float)
                table[n, i] = counts / counts.sum()
        return cls(table)


def mi_loss(stats):
    """Negative teacher/expert mutual information summed over layers.

    With ``p(I_i) = 1/I`` and ``p(I_i, E_l) = p(E_l | I_i) / I`` the log ratio
    reduces to ``log p(E_l | I_i) - log p(E_l)``. Zero-probability cells
    contribute exactly zero.
    """
    if not isinstance(stats, SelectionStats):
        stats = SelectionStats(stats)
    cond = stats.conditional
    N, I, L = cond.shape
    total = None
    for n in range(N):
        c = ad.gather_rows(cond, [n]).reshape(I, L)
        marg = ad.mean(c, axis=0)
        ratio = ad.log(ad.clamp_min(c, 1e-300)) - ad.log(ad.clamp_min(marg, 1e-300))
        term = ad.sum_(c * ratio) * (1.0 / I)
        total = term if total is None else total + term
    return -total


def pretrain_terms(model, images, targets, cfg, train_mode=True, rng=None):
    """All pretraining quantities for one batch.

    Returns a dict with ``loss``, ``distill``, ``mi`` (Tensors), per-teacher
    ``cos`` and ``sl1`` lists, the ``stats`` used by the MI term, the student
    predictions and the hard expert selections ``selected[n][i]``.
    """
    n_teachers = len(model.heads)
    alpha = cfg.weights(n_teachers)
    z = forward_bvt(model, images)
    probs = [[None] * n_teachers for _ in model.vel]
    selected = [[None] * n_teachers for _ in model.vel]
    cos_terms, sl1_terms, preds = [], [], []
    distill = None
    for i in range(n_teachers):
        trace = []
        y = forward_vel(model, z, TS(i), train_mode=train_mode, rng=rng, trace=trace)
        pred = project_to_teacher(model, y, i)
        preds.append(pred)
        lc = cosine_loss(pred, targets[i])
        ls = smooth_l1(pred, targets[i], cfg.delta)
        cos_terms.append(lc)
        sl1_terms.append(ls)
        term = (cfg.beta * lc + (1.0 - cfg.beta) * ls) * alpha[i]
        distill = term if distill is None else distill + term
        for rec in trace:
            probs[rec["layer"]][i] = rec["probs"]
            selected[rec["layer"]][i] = rec["selected"]
    stats = SelectionStats.from_probs(probs)
    mi = mi_loss(stats)
    loss = distill + cfg.gamma * mi if cfg.gamma else distill
    return {"loss": loss, "distill": distill, "mi": mi, "cos": cos_terms, "sl1": sl1_terms,
            "stats": stats, "preds": preds, "selected": selected}


def distill_loss(model, images, teacher_bank, cfg, train_mode=False, rng=None):
    return pretrain_terms(model, images, teacher_bank.targets(images), cfg, train_mode, rng)["distill"]


def pretrain_loss(model, images, teacher_bank, cfg, train_mode=True, rng=None):
    return pretrain_terms(model, images, teacher_bank.targets(images), cfg, train_mode, rng)["loss"]
