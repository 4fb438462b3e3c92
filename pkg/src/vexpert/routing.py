"""Robot-phase routers, Gumbel-softmax teacher choice and top-K annealing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .moe import NoisyGate, gate_scores, topk_mask
from .nn import Linear, Module, Parameter

FRAMEWISE = "framewise"
LAYERWISE = "layerwise"


@dataclass(frozen=True)
class CTASchedule:
    """Active-expert count annealed from ``n_experts`` down to ``k_min`` over ``horizon`` steps."""

    n_experts: int
    k_min: int
    horizon: int

    def __post_init__(self):
        if not 1 <= self.k_min <= self.n_experts:
            raise ContractError(f"k_min={self.k_min} must lie in [1, {self.n_experts}]")
        if self.horizon < 1:
            raise ContractError("annealing horizon must be >= 1 step")

    def __call__(self, step):
        return cta_k(self, step)


def cta_k(sched, step):
    """``max(k_min, floor(L - (L - k_min) * s / S))`` in exact integer arithmetic."""
    if step < 0:
        raise ContractError("step must be non-negative")
    L, kmin, S = sched.n_experts, sched.k_min, sched.horizon
    if kmin > L:
        raise ContractError(f"k_min={kmin} exceeds L={L}")
    # floor(L - a/S) == L - ceil(a/S)
    a = (L - kmin) * int(step)
    return max(kmin, L - (-(-a // S)))


def gumbel_softmax(pi, tau=1.0, g=None, rng=None):
    """Soft relaxation ``softmax((log pi + g) / tau)``; returns (soft, g)."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    pi = ad.as_tensor(pi)
    if g is None:
        g = rng.gumbel(size=pi.shape)
    logp = ad.log(ad.clamp_min(pi, 1e-12))
    return ad.softmax((logp + ad.Tensor(g)) * (1.0 / tau), axis=-1), g


def one_hot_argmax(values):
    values = np.asarray(values)
    out = np.zeros(values.shape)
    np.put_along_axis(out, values.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return out


def gumbel_sample(pi, tau=1.0, rng=None, train_mode=True, g=None):
    """Discrete teacher choice.

    Training: exact one-hot at the argmax of the Gumbel-perturbed relaxation,
    with the gradient of the soft relaxation (straight-through). Evaluation:
    one-hot at ``argmax(pi)``, lowest index on ties.
    """
    pi = ad.as_tensor(pi)
    if not train_mode:
        return ad.Tensor(one_hot_argmax(pi.data))
    soft, _ = gumbel_softmax(pi, tau, g, rng)
    return ad.straight_through(one_hot_argmax(soft.data), soft)


class TeacherChoiceRouter(Module):
    """Attention pooling over patches, then Linear-SiLU-Linear-SiLU-Linear to teacher logits.

    In layerwise mode each VEL layer adds its own learned logit offset.
    """

    def __init__(self, dim, n_teachers, n_layers, rng, hidden=None, granularity=FRAMEWISE,
                 tau=1.0, dropout=0.1):
        if granularity not in (FRAMEWISE, LAYERWISE):
            raise ContractError(f"unknown granularity {granularity!r}")
        hidden = dim if hidden is None else hidden
        self.query = Parameter(rng.normal(0.0, 0.02, size=dim))
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, n_teachers, rng, std=0.02)
        self.layer_bias = Parameter(np.zeros((n_layers, n_teachers))) if granularity == LAYERWISE else None
        self.granularity = granularity
        self.tau = tau
        self.dropout = dropout
        self.n_teachers = n_teachers

    def pool(self, x):
        """Single-query scaled dot-product pooling: (B, T, M) -> (B, M)."""
        B, T, M = x.shape
        scores = ad.matmul(x, self.query.reshape(M, 1)).reshape(B, T) * (1.0 / np.sqrt(M))
        attn = ad.softmax(scores, axis=-1)
        return ad.matmul(attn.reshape(B, 1, T), x).reshape(B, M)

    def logits(self, x, layer=0, train_mode=False, rng=None):
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        h = self.pool(x)
        h = ad.dropout(ad.silu(self.fc1(h)), self.dropout, rng, train_mode)
        h = ad.dropout(ad.silu(self.fc2(h)), self.dropout, rng, train_mode)
        out = self.fc3(h)
        if self.layer_bias is not None:
            out = out + ad.gather_rows(self.layer_bias, [layer]).reshape(self.n_teachers)
        return out.reshape(self.n_teachers) if squeeze else out


def route_teacher(router, patch_features, layer=0, train_mode=False, rng=None):
    """Teacher selection weights, one-hot per frame: (T, M) -> (I,) or (B, T, M) -> (B, I)."""
    pi = ad.softmax(router.logits(ad.as_tensor(patch_features), layer, train_mode, rng), axis=-1)
    return gumbel_sample(pi, router.tau, rng, train_mode)


class PatchExpertRouter(Module):
    """One fresh NoisyGate per VEL layer, scoring experts per patch token."""

    def __init__(self, dim, n_experts, n_layers, rng, hidden=None):
        self.gates = [NoisyGate(dim, n_experts, rng, hidden) for _ in range(n_layers)]


def route_patch(router, token, layer=0, k=1, train_mode=False, rng=None):
    """Sparse expert weights for a token (or stack of tokens)."""
    return topk_mask(gate_scores(router.gates[layer], ad.as_tensor(token), train_mode, rng), k)
