"""Experts, noisy top-K gates and sparse token dispatch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .nn import Linear, Module, Parameter

DFM = "DFM"
TFS = "TFS"


class ExpertMLP(Module):
    """Linear -> GELU -> Linear, dim -> hidden -> dim.

    ``calls`` counts the token rows this expert has evaluated.
    """

    def __init__(self, dim, hidden, rng, origin=DFM, std=None):
        if origin not in (DFM, TFS):
            raise ContractError(f"unknown expert origin {origin!r}")
        self.fc1 = Linear(dim, hidden, rng, std=std)
        self.fc2 = Linear(hidden, dim, rng, std=std)
        self.origin = origin
        self.calls = 0

    @property
    def dim(self):
        return self.fc1.weight.shape[0]

    def __call__(self, x):
        self.calls += int(np.prod(x.shape[:-1]))
        return self.fc2(ad.gelu(self.fc1(x)))


class NoisyGate(Module):
    """Two-layer perceptron emitting clean logits and noise scales ``[s1; s2]``."""

    def __init__(self, dim, n_experts, rng, hidden=None, noise_enabled=True):
        hidden = dim if hidden is None else hidden
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, 2 * n_experts, rng, std=0.02)
        self.noise_enabled = noise_enabled

    @property
    def n_experts(self):
        return self.fc2.weight.shape[1] // 2

    def __call__(self, x):
        s = self.fc2(ad.gelu(self.fc1(x)))
        L = self.n_experts
        return ad.slice_last(s, 0, L), ad.slice_last(s, L, 2 * L)

    def extend(self, count, rng, std=0.02):
        """Append ``count`` expert columns to both the logit and the noise halves."""
        L = self.n_experts
        W, b = self.fc2.weight.data, self.fc2.bias.data
        h = W.shape[0]
        new_w = rng.normal(0.0, std, size=(h, count))
        new_b = np.zeros(count)
        W2 = np.concatenate([W[:, :L], new_w, W[:, L:], rng.normal(0.0, std, size=(h, count))], axis=1)
        b2 = np.concatenate([b[:L], new_b, b[L:], np.zeros(count)])
        trainable = self.fc2.weight.requires_grad
        self.fc2.weight = Parameter(W2, trainable)
        self.fc2.bias = Parameter(b2, trainable)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def gate_logits(gate, x, train_mode=False, rng=None):
    """``s1 + eps`` with ``eps ~ N(0, softplus(s2))`` in training, ``s1`` otherwise.

    The noise is reparameterised as ``softplus(s2) * xi`` so the noise scale
    receives gradients.
    """
    s1, s2 = gate(x)
    if not (train_mode and gate.noise_enabled):
        return s1
    xi = _rng(rng).standard_normal(s1.shape)
    return s1 + ad.softplus(s2) * ad.Tensor(xi)


def gate_scores(gate, x, train_mode=False, rng=None):
    return ad.softmax(gate_logits(gate, x, train_mode, rng), axis=-1)


def topk_indices(scores, k):
    """Indices of the ``k`` largest entries along the last axis, ties to the lowest index."""
    scores = np.asarray(scores)
    L = scores.shape[-1]
    if not 1 <= k <= L:
        raise ContractError(f"K={k} outside [1, {L}]")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def topk_mask(scores, k, renormalize=False):
    """Keep the top-``k`` scores in place and zero the rest.

    Without ``renormalize`` the kept weights stay the raw softmax values, so
    they sum to at most one.
    """
    scores = ad.as_tensor(scores)
    idx = topk_indices(scores.data, k)
    mask = np.zeros(scores.shape)
    np.put_along_axis(mask, idx, 1.0, axis=-1)
    w = scores * ad.Tensor(mask)
    if renormalize:
        w = w / ad.expand_last(ad.sum_(w, axis=-1), scores.shape[-1])
    return w


@dataclass
class Routing:
    """What one MoE call did: soft probabilities, chosen experts, evaluation counts."""

    probs: ad.Tensor
    selected: np.ndarray
    counts: np.ndarray


class MoELayer(Module):
    """``L`` experts sharing one token stream, plus the gates attached to them.

    ``gates`` maps a routing name (``"ts0"``, ``"per"``, ...) to a NoisyGate.
    """

    def __init__(self, dim, hidden, n_experts, k, rng, origin=DFM):
        self.experts = [ExpertMLP(dim, hidden, rng, origin) for _ in range(n_experts)]
        self.gates = {}
        self.dim = dim
        self.hidden = hidden
        self._k = 1
        self.k = k

    @property
    def n_experts(self):
        return len(self.experts)

    @property
    def k(self):
        return self._k

    @k.setter
    def k(self, value):
        if not 1 <= value <= self.n_experts:
            raise ContractError(f"K={value} outside [1, {self.n_experts}]")
        self._k = int(value)

    def attach_gate(self, name, gate):
        if gate.n_experts != self.n_experts:
            raise ContractError(f"gate {name!r} scores {gate.n_experts} experts, layer has {self.n_experts}")
        self.gates[name] = gate
        return gate

    def reset_counters(self):
        for e in self.experts:
            e.calls = 0


def moe_forward(layer, tokens, gate, k=None, train_mode=False, rng=None,
                renormalize=False, return_routing=False):
    """Sparse mixture ``y = sum_l w_l E_l(x)`` over the top-``k`` experts per token.

    Tokens may carry any leading axes; only selected (token, expert) pairs are
    evaluated.
    """
    if isinstance(gate, str):
        if gate not in layer.gates:
            raise ContractError(f"gate {gate!r} is not attached to this layer")
        gate = layer.gates[gate]
    k = layer.k if k is None else k
    L = layer.n_experts
    if gate.n_experts != L:
        raise ContractError(f"gate scores {gate.n_experts} experts, layer has {L}")
    tokens = ad.as_tensor(tokens)
    lead = tokens.shape[:-1]
    M = tokens.shape[-1]
    x = tokens.reshape(-1, M)
    n = x.shape[0]

    probs = gate_scores(gate, x, train_mode, rng)
    sel = topk_indices(probs.data, k)
    weights = topk_mask(probs, k, renormalize)
    counts = np.zeros(n, dtype=np.int64)

    out = None
    for l, expert in enumerate(layer.experts):
        rows = np.nonzero((sel == l).any(axis=-1))[0]
        if rows.size == 0:
            continue
        counts[rows] += 1
        y = expert(ad.gather_rows(x, rows))
        w = ad.gather_rows(ad.slice_last(weights, l, l + 1).reshape(n), rows)
        part = ad.scatter_add_rows(y * ad.expand_last(w, M), rows, n)
        out = part if out is None else out + part
    out = out.reshape(lead + (M,))
    if return_routing:
        return out, Routing(probs.reshape(lead + (L,)), sel.reshape(lead + (k,)), counts.reshape(lead))
    return out


def dense_mixture(layer, tokens, weights):
    """Reference: evaluate every expert and weight it. Used as a test oracle."""
    tokens = ad.as_tensor(tokens)
    weights = ad.as_tensor(weights)
    M = tokens.shape[-1]
    out = None
    for l, expert in enumerate(layer.experts):
        w = ad.slice_last(weights, l, l + 1).reshape(weights.shape[:-1])
        part = expert(tokens) * ad.expand_last(w, M)
        out = part if out is None else out + part
    return out


def add_experts(layer, count, rng, origin=TFS, std=0.02):
    """Grow ``layer`` by ``count`` freshly initialised experts and widen every gate."""
    if count < 1:
        raise ContractError("count must be >= 1")
    for _ in range(count):
        layer.experts.append(ExpertMLP(layer.dim, layer.hidden, rng, origin, std=std))
    for gate in layer.gates.values():
        gate.extend(count, rng, std)


def freeze_dfm(layer):
    for e in layer.experts:
        if e.origin == DFM:
            e.freeze()


def retain_experts(layer, count):
    """Keep only the first ``count`` experts. Gates sized for the old set are dropped."""
    if not 0 <= count <= layer.n_experts:
        raise ContractError(f"cannot keep {count} of {layer.n_experts} experts")
    if count == layer.n_experts:
        return
    del layer.experts[count:]
    layer.gates.clear()
