"""Desk-scale vision transformer: plain blocks followed by mixture-of-experts blocks."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import patchify, substream
from .errors import ContractError, FormatError, ShapeError
from .fileio import atomic_write
from .moe import DFM, MoELayer, NoisyGate, moe_forward
from .nn import LayerNorm, Linear, Module, Parameter
from .routing import (FRAMEWISE, LAYERWISE, PatchExpertRouter, TeacherChoiceRouter, cta_k,
                      route_teacher)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    dim: int = 32
    heads: int = 2
    mlp_ratio: int = 4
    n_plain: int = 4
    n_moe: int = 3
    n_experts: int = 6
    top_k: int = 2
    n_teachers: int = 3
    teacher_dims: tuple = (32, 32, 32)
    gate_hidden: int = 4
    router_hidden: int = 32
    router_dropout: float = 0.1
    tau: float = 1.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ContractError("dim must be divisible by heads")
        if not 1 <= self.top_k <= self.n_experts:
            raise ContractError("top_k must lie in [1, n_experts]")
        if len(self.teacher_dims) != self.n_teachers:
            raise ContractError("teacher_dims needs one entry per teacher")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class Strategy:
    """Routing strategy tag: ``ts`` (one teacher's router), ``ftr``, ``ltr`` or ``per``."""

    kind: str
    teacher: int | None = None

    def __post_init__(self):
        if self.kind not in ("ts", "ftr", "ltr", "per"):
            raise ContractError(f"unknown strategy {self.kind!r}")
        if (self.kind == "ts") != (self.teacher is not None):
            raise ContractError("a teacher index is required for ts and only for ts")

    @property
    def label(self):
        return f"TS{self.teacher}" if self.kind == "ts" else self.kind.upper()


def TS(i):
    return Strategy("ts", i)


FTR = Strategy("ftr")
LTR = Strategy("ltr")
PER = Strategy("per")


class PatchEmbedder(Module):
    def __init__(self, cfg, rng):
        self.image_size, self.channels, self.patch = cfg.image_size, cfg.channels, cfg.patch_size
        self.proj = Linear(cfg.patch_size**2 * cfg.channels, cfg.dim, rng)
        self.pos = Parameter(rng.normal(0.0, 0.5, size=(cfg.n_patches, cfg.dim)))

    def __call__(self, images):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        expected = (self.image_size, self.image_size, self.channels)
        if images.shape[1:] != expected:
            raise ShapeError(f"image extents {images.shape[1:]} do not match embedder {expected}")
        return self.proj(ad.Tensor(patchify(images, self.patch))) + self.pos


class Attention(Module):
    def __init__(self, dim, heads, rng):
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.heads = heads

    def _split(self, x, B, T):
        return x.reshape(B, T, self.heads, -1).transpose(0, 2, 1, 3)

    def __call__(self, x):
        B, T, M = x.shape
        q, k, v = (self._split(f(x), B, T) for f in (self.q, self.k, self.v))
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(M // self.heads))
        out = ad.matmul(ad.softmax(scores, axis=-1), v)
        return self.proj(out.transpose(0, 2, 1, 3).reshape(B, T, M))


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, cfg, rng):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = Attention(cfg.dim, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.dim)
        self.mlp = FeedForward(cfg.dim, cfg.mlp_ratio * cfg.dim, rng)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class MoEBlock(Module):
    """Pre-norm block whose feed-forward sublayer is a MoELayer."""

    def __init__(self, cfg, rng):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = Attention(cfg.dim, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.dim)
        self.moe = MoELayer(cfg.dim, cfg.mlp_ratio * cfg.dim, cfg.n_experts, cfg.top_k, rng, DFM)
        for i in range(cfg.n_teachers):
            self.moe.attach_gate(f"ts{i}", NoisyGate(cfg.dim, cfg.n_experts, rng, cfg.gate_hidden))


class VERModel(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        rng = substream(seed, "init")
        self.cfg = cfg
        self.embed = PatchEmbedder(cfg, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_plain)]
        self.vel = [MoEBlock(cfg, rng) for _ in range(cfg.n_moe)]
        self.heads = [Linear(cfg.dim, d, rng) for d in cfg.teacher_dims]
        self.teacher_routers = {}
        self.patch_router = None

    def attach_teacher_router(self, granularity, rng):
        router = TeacherChoiceRouter(self.cfg.dim, self.cfg.n_teachers, self.cfg.n_moe, rng,
                                     self.cfg.router_hidden, granularity, self.cfg.tau,
                                     self.cfg.router_dropout)
        self.teacher_routers[granularity] = router
        return router

    def attach_patch_router(self, rng):
        n_exp = self.vel[0].moe.n_experts
        router = PatchExpertRouter(self.cfg.dim, n_exp, self.cfg.n_moe, rng, self.cfg.gate_hidden)
        for blk, gate in zip(self.vel, router.gates):
            blk.moe.attach_gate("per", gate)
        self.patch_router = router
        return router

    def router_for(self, strategy):
        if strategy.kind == "ts":
            if not 0 <= strategy.teacher < self.cfg.n_teachers:
                raise ContractError(f"teacher index {strategy.teacher} outside [0, {self.cfg.n_teachers})")
            return None
        if strategy.kind == "per":
            if self.patch_router is None:
                raise ContractError("PER strategy used before attach_patch_router()")
            return self.patch_router
        gran = FRAMEWISE if strategy.kind == "ftr" else LAYERWISE
        if gran not in self.teacher_routers:
            raise ContractError(f"{strategy.label} strategy used before attach_teacher_router({gran!r})")
        return self.teacher_routers[gran]

    def backbone_parameters(self):
        """Parameters frozen in the robot phase: embedder, all blocks, DFM experts, TS gates."""
        params = self.embed.parameters()
        for b in self.blocks:
            params += b.parameters()
        for b in self.vel:
            params += b.ln1.parameters() + b.attn.parameters() + b.ln2.parameters()
            for e in b.moe.experts:
                if e.origin == DFM:
                    params += e.parameters()
            for name, g in b.moe.gates.items():
                if name.startswith("ts"):
                    params += g.parameters()
        return params


def forward_bvt(model, images):
    x = model.embed(images)
    for blk in model.blocks:
        x = blk(x)
    return x


def _teacher_mixture(moe, u, w, layer_k):
    """MoE output under per-frame teacher weights ``w`` (B, I), exactly one-hot in value.

    Returns the output and the per-frame winning routing (selected experts).
    TS gates are frozen in the robot phase and run noise-free.
    """
    B, T, M = u.shape
    n_teachers = w.shape[-1]
    choice = w.data.argmax(axis=-1)
    selected = np.zeros((B, T, layer_k), dtype=np.int64)
    out = None
    if not w.requires_grad:
        for i in range(n_teachers):
            frames = np.nonzero(choice == i)[0]
            if frames.size == 0:
                continue
            y, r = moe_forward(moe, ad.gather_rows(u, frames), f"ts{i}", layer_k, return_routing=True)
            selected[frames] = r.selected
            part = ad.scatter_add_rows(y, frames, B)
            out = part if out is None else out + part
        return out, selected
    for i in range(n_teachers):
        y, r = moe_forward(moe, u, f"ts{i}", layer_k, return_routing=True)
        mask = choice == i
        selected[mask] = r.selected[mask]
        wi = ad.expand_last(ad.expand_last(ad.slice_last(w, i, i + 1).reshape(B), T), M)
        part = y * wi
        out = part if out is None else out + part
    return out, selected


def forward_vel(model, z, strategy, step=0, *, k=None, cta=None, train_mode=False, rng=None,
                trace=None):
    """Run the MoE blocks on unified tokens ``z`` (B, T, M) under ``strategy``.

    ``trace``, when a list, receives one dict per layer with the soft gate
    probabilities (when a single gate ran), hard expert selections and, for
    teacher routing, the per-frame teacher choice.
    """
    router = model.router_for(strategy)
    z = ad.as_tensor(z)
    if z.ndim == 2:
        z = z.reshape((1,) + z.shape)
    h = z
    w = None
    if strategy.kind == "ftr":
        w = route_teacher(router, z, 0, train_mode, rng)
    for n, blk in enumerate(model.vel):
        h = h + blk.attn(blk.ln1(h))
        u = blk.ln2(h)
        rec = {"layer": n}
        if strategy.kind in ("ts", "per"):
            if strategy.kind == "ts":
                gate, kk = f"ts{strategy.teacher}", blk.moe.k
            else:
                gate = "per"
                kk = cta_k(cta, step) if cta is not None else (k if k is not None else blk.moe.k)
            y, r = moe_forward(blk.moe, u, gate, kk, train_mode, rng, return_routing=True)
            rec.update(probs=r.probs, selected=r.selected, k=kk)
            if strategy.kind == "ts":
                rec["teacher"] = strategy.teacher
        else:
            if strategy.kind == "ltr":
                w = route_teacher(router, h, n, train_mode, rng)
            y, sel = _teacher_mixture(blk.moe, u, w, blk.moe.k)
            rec.update(selected=sel, teacher=w.data.argmax(axis=-1), k=blk.moe.k)
        if trace is not None:
            trace.append(rec)
        h = h + y
    return h


def project_to_teacher(model, y, i):
    if not 0 <= i < len(model.heads):
        raise ContractError(f"teacher index {i} outside [0, {len(model.heads)})")
    return model.heads[i](y)


# ------------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"VERCKPT1"


def encode_checkpoint(state):
    """Magic, u32 record count, length-prefixed UTF-8 JSON records, fp64 LE payload."""
    records, payload, offset = [], [], 0
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would make 0-d arrays 1-d
        records.append(json.dumps({"name": name, "shape": list(arr.shape), "offset": offset}).encode())
        payload.append(arr.tobytes())
        offset += arr.nbytes
    head = [CKPT_MAGIC, struct.pack("<I", len(records))]
    for r in records:
        head += [struct.pack("<I", len(r)), r]
    return b"".join(head + payload)


def decode_checkpoint(blob):
    if len(blob) < 12 or blob[:8] != CKPT_MAGIC:
        raise FormatError("missing VERCKPT1 magic", 0)
    (n,) = struct.unpack_from("<I", blob, 8)
    pos, manifest = 12, []
    for _ in range(n):
        if pos + 4 > len(blob):
            raise FormatError("truncated manifest", pos)
        (length,) = struct.unpack_from("<I", blob, pos)
        if pos + 4 + length > len(blob):
            raise FormatError("truncated manifest record", pos)
        try:
            rec = json.loads(blob[pos + 4: pos + 4 + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable manifest record: {exc}", pos) from None
        manifest.append(rec)
        pos += 4 + length
    state = {}
    for rec in manifest:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        start = pos + rec["offset"]
        if start + 8 * count > len(blob):
            raise FormatError(f"payload of {rec['name']!r} runs past end of file", start)
        state[rec["name"]] = np.frombuffer(blob, "<f8", count, start).reshape(rec["shape"]).astype(np.float64)
    return state


def state_dict(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def save_checkpoint(model, path):
    atomic_write(path, encode_checkpoint(state_dict(model)))


def read_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def _abbrev(names, limit=8):
    head = ", ".join(names[:limit])
    return head + (f" (+{len(names) - limit} more)" if len(names) > limit else "")


def load_state(model, state):
    """Copy ``state`` into ``model``; any name or shape difference is a ContractError."""
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(state))
    unexpected = sorted(set(state) - set(params))
    shapes = sorted(n for n in set(params) & set(state) if params[n].shape != tuple(state[n].shape))
    if missing or unexpected or shapes:
        lines = [f"missing: {_abbrev(missing)}"] if missing else []
        lines += [f"unexpected: {_abbrev(unexpected)}"] if unexpected else []
        shown = [f"shape {n}: model {params[n].shape} vs file {tuple(state[n].shape)}" for n in shapes[:8]]
        if len(shapes) > 8:
            shown.append(f"... {len(shapes) - 8} more shape mismatches")
        lines += shown
        raise ContractError("checkpoint does not match model; " + "; ".join(lines))
    for n, p in params.items():
        p.data = np.array(state[n], dtype=np.float64)


def load_checkpoint(model, path):
    load_state(model, read_checkpoint(path))
    return model


def config_dict(cfg):
    d = asdict(cfg)
    d["teacher_dims"] = list(cfg.teacher_dims)
    return d
