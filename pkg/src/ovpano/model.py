"""Toy-scale superpoint graph transformer with top-2 mixture-of-experts blocks.

Encoder runs fine to coarse, decoder coarse to fine. Every block is a sparse
graph attention layer replicated over ``n_experts`` experts; a gate reads each
node's normalized state together with the mean encoding of its incoming edges
and routes the node through its two most probable experts. A GELU head emits a
unit-length semantic vector per level-1 superpoint and an edge head scores the
affinity of adjacent level-1 superpoints.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .superpoint import EDGE_DIM, GEOM_DIM, SuperpointHierarchy

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"HCK1"
AFFINITY_CLAMP = 1e-7


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class MoeConfig:
    levels: int = 3
    hidden: int = 32
    feat_dim: int = 256
    n_experts: int = 4
    top_k: int = 2
    heads: int = 2
    head_layers: int = 3
    margin: float = 0.2
    w_rec: float = 1.0
    w_tri: float = 0.5
    w_bal: float = 0.01
    w_aff: float = 1.0
    lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.top_k != 2:
            raise ConfigError("top_k is fixed at 2")
        if self.n_experts < self.top_k:
            raise ConfigError("n_experts must be >= top_k")
        if min(self.hidden, self.feat_dim, self.levels, self.heads, self.head_layers) < 1:
            raise ConfigError("dimensions, levels, heads and head_layers must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError("hidden must be divisible by heads")
        if not 0 < self.margin < 2:
            raise ConfigError("margin must lie in (0, 2)")

    @classmethod
    def from_dict(cls, d: dict) -> "MoeConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------- inputs

def _standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(0) if len(x) else np.zeros(x.shape[1])
    sd = x.std(0) if len(x) else np.ones(x.shape[1])
    sd = np.where(sd > 1e-9, sd, 1.0)
    return (x - mu) / sd


def _rms_scale(x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return x
    rms = np.sqrt((x ** 2).mean(0))
    return x / np.where(rms > 1e-9, rms, 1.0)


@dataclass
class LevelGraph:
    geom: torch.Tensor  # (S, GEOM_DIM) standardized
    src: torch.Tensor  # edges incl. self loops
    dst: torch.Tensor
    edge_feat: torch.Tensor  # (Q + S, EDGE_DIM), self loops zero
    rpe_mean: torch.Tensor  # (S, EDGE_DIM) mean over incoming non-self edges
    parent: Optional[torch.Tensor]  # (S,) index into the next coarser level
    n_real_edges: int

    @property
    def size(self) -> int:
        return self.geom.shape[0]


@dataclass
class GraphInputs:
    levels: List[LevelGraph]
    targets: Optional[torch.Tensor] = None  # (S1, 3, C)
    target_mask: Optional[torch.Tensor] = None
    classes: Optional[np.ndarray] = None  # majority pseudo-class per level-1 superpoint
    affinity_labels: Optional[torch.Tensor] = None  # per level-1 directed edge

    @classmethod
    def from_hierarchy(cls, hier: SuperpointHierarchy) -> "GraphInputs":
        levels = []
        for i, lv in enumerate(hier.levels):
            s = lv.size
            e = lv.edges.reshape(-1, 2)
            ef = _rms_scale(lv.edge_feat.reshape(-1, EDGE_DIM))
            loops = np.arange(s)
            src = np.concatenate([e[:, 0], loops])
            dst = np.concatenate([e[:, 1], loops])
            feat = np.concatenate([ef, np.zeros((s, EDGE_DIM))])
            deg = np.bincount(e[:, 1], minlength=s).astype(np.float64)
            agg = np.zeros((s, EDGE_DIM))
            np.add.at(agg, e[:, 1], ef)
            agg = agg / np.maximum(deg, 1.0)[:, None]
            parent = None
            if i + 1 < len(hier.levels):
                parent = torch.as_tensor(hier.levels[i + 1].parent_of, dtype=torch.long)
            levels.append(LevelGraph(
                torch.as_tensor(_standardize(lv.sp_geom), dtype=DTYPE),
                torch.as_tensor(src, dtype=torch.long), torch.as_tensor(dst, dtype=torch.long),
                torch.as_tensor(feat, dtype=DTYPE), torch.as_tensor(agg, dtype=DTYPE),
                parent, len(e)))
        out = cls(levels)
        lv1 = hier.levels[0]
        if lv1.targets is not None:
            out.targets = torch.as_tensor(lv1.targets, dtype=DTYPE)
            out.target_mask = torch.as_tensor(lv1.target_mask, dtype=torch.bool)
            out.classes = np.where(lv1.target_mask, lv1.majority_class, -1)
            out.affinity_labels = torch.as_tensor(affinity_labels(hier), dtype=DTYPE)
        return out


def affinity_labels(hier: SuperpointHierarchy) -> np.ndarray:
    """1 for level-1 edges whose endpoints share a thing pseudo-instance, else 0."""
    lv = hier.levels[0]
    e = lv.edges.reshape(-1, 2)
    inst = lv.majority_instance
    a, b = e[:, 0], e[:, 1]
    same = (inst[a] == inst[b]) & (inst[a] >= 0) & lv.is_thing[a] & lv.is_thing[b]
    return same.astype(np.float64)


# ---------------------------------------------------------------- routing

def top2(probs: torch.Tensor) -> torch.Tensor:
    """Indices of the two largest probabilities per row; ties keep the lower expert id."""
    order = torch.sort(probs, dim=1, descending=True, stable=True).indices
    return order[:, :2]


def gate(node_repr, edge_rpe_mean, weight, bias):
    """Gate probabilities, selected expert pair and renormalized combine weights.

    ``weight`` has shape ``(E, D + D_e)``.
    """
    x = torch.cat([torch.as_tensor(node_repr, dtype=DTYPE).reshape(-1, np.shape(node_repr)[-1]),
                   torch.as_tensor(edge_rpe_mean, dtype=DTYPE).reshape(-1, np.shape(edge_rpe_mean)[-1])], 1)
    logits = x @ torch.as_tensor(weight, dtype=DTYPE).T + torch.as_tensor(bias, dtype=DTYPE)
    probs = torch.softmax(logits, dim=1)
    sel = top2(probs)
    w = probs.gather(1, sel)
    return probs, sel, w / w.sum(1, keepdim=True)


def slot_fractions(selected: torch.Tensor, n_experts: int) -> torch.Tensor:
    """Share of routing slots per expert; each node contributes two half-weight slots."""
    counts = torch.bincount(selected.reshape(-1), minlength=n_experts).to(DTYPE)
    return counts / selected.numel()


def load_balance_loss(probs, selected) -> torch.Tensor:
    """``E * sum_e f_e * P_e`` with slot fractions ``f`` and mean probabilities ``P``."""
    probs = torch.as_tensor(probs, dtype=DTYPE)
    selected = torch.as_tensor(selected, dtype=torch.long)
    if probs.shape[0] == 0:
        raise ValueError("load balance needs at least one routed node")
    n_experts = probs.shape[1]
    return n_experts * (slot_fractions(selected, n_experts) * probs.mean(0)).sum()


# ---------------------------------------------------------------- layers

def segment_softmax(scores: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of ``scores`` (Q, H) within groups sharing ``index``."""
    h = scores.shape[1]
    mx = torch.full((n, h), -torch.inf, dtype=scores.dtype)
    mx = mx.scatter_reduce(0, index[:, None].expand(-1, h), scores.detach(), "amax")
    ex = torch.exp(scores - mx[index])
    den = torch.zeros((n, h), dtype=scores.dtype).index_add(0, index, ex)
    return ex / den[index]


class GraphAttentionExpert(nn.Module):
    """Multi-head attention over incoming edges with additive relative encodings."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.rpe = nn.Linear(EDGE_DIM, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, z: torch.Tensor, g: LevelGraph) -> torch.Tensor:
        s, d = z.shape
        dh = d // self.heads
        r = self.rpe(g.edge_feat).view(-1, self.heads, dh)
        q = self.q(z).view(s, self.heads, dh)[g.dst]
        k = self.k(z).view(s, self.heads, dh)[g.src] + r
        v = self.v(z).view(s, self.heads, dh)[g.src] + r
        att = segment_softmax((q * k).sum(-1) / math.sqrt(dh), g.dst, s)
        msg = torch.zeros((s, self.heads, dh), dtype=z.dtype).index_add(0, g.dst, att[..., None] * v)
        return self.out(msg.reshape(s, d))


@dataclass
class GateRecord:
    probs: torch.Tensor
    selected: torch.Tensor  # routing actually used
    natural: torch.Tensor  # top-2 of the current probabilities
    weights: torch.Tensor

    @property
    def balance(self) -> torch.Tensor:
        return load_balance_loss(self.probs, self.selected)


class MoeBlock(nn.Module):
    def __init__(self, dim: int, heads: int, n_experts: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.gate = nn.Linear(dim + EDGE_DIM, n_experts)
        self.experts = nn.ModuleList(GraphAttentionExpert(dim, heads) for _ in range(n_experts))
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ffn1 = nn.Linear(dim, 2 * dim)
        self.ffn2 = nn.Linear(2 * dim, dim)

    def forward(self, h: torch.Tensor, g: LevelGraph, routing: Optional[torch.Tensor] = None):
        z = self.norm1(h)
        probs = torch.softmax(self.gate(torch.cat([z, g.rpe_mean], 1)), dim=1)
        natural = top2(probs.detach())
        sel = natural if routing is None else routing
        w = probs.gather(1, sel)
        w = w / w.sum(1, keepdim=True)
        outs = torch.stack([e(z, g) for e in self.experts])  # (E, S, D)
        rows = torch.arange(h.shape[0])
        mixed = w[:, 0:1] * outs[sel[:, 0], rows] + w[:, 1:2] * outs[sel[:, 1], rows]
        h = h + mixed
        h = h + self.ffn2(F.gelu(self.ffn1(self.norm2(h))))
        return h, GateRecord(probs, sel, natural, w)


def head_dims(hidden: int, out: int, layers: int) -> List[int]:
    """Widths growing geometrically from ``hidden`` to ``out``."""
    return [int(round(hidden * (out / hidden) ** (i / layers))) for i in range(layers + 1)]


class MoeSuperpointNet(nn.Module):
    def __init__(self, config: MoeConfig):
        super().__init__()
        self.config = config
        d = config.hidden
        L = config.levels
        self.embed = nn.ModuleList(nn.Linear(GEOM_DIM, d) for _ in range(L))
        self.encoders = nn.ModuleList(MoeBlock(d, config.heads, config.n_experts) for _ in range(L))
        self.decoders = nn.ModuleList(MoeBlock(d, config.heads, config.n_experts) for _ in range(L - 1))
        dims = head_dims(d, config.feat_dim, config.head_layers)
        self.semantic = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.norm_out = nn.LayerNorm(d, dtype=DTYPE)
        self.aff1 = nn.Linear(2 * d + EDGE_DIM, d)
        self.aff2 = nn.Linear(d, 1)
        self.to(DTYPE)
        self.reset_parameters(config.seed)

    @property
    def blocks(self) -> List[MoeBlock]:
        return list(self.encoders) + list(self.decoders)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.split(".")[-2].startswith("norm"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) / math.sqrt(p.shape[1]))

    def forward(self, inputs: GraphInputs, routing: Optional[Sequence[torch.Tensor]] = None):
        L = self.config.levels
        if len(inputs.levels) != L:
            raise ConfigError(f"hierarchy depth {len(inputs.levels)} != configured levels {L}")
        records: List[GateRecord] = []
        route = iter(routing) if routing is not None else None
        states = []
        h = None
        for i, g in enumerate(inputs.levels):
            x = self.embed[i](g.geom)
            if i > 0:
                prev = inputs.levels[i - 1]
                cnt = torch.zeros(g.size, dtype=DTYPE).index_add(0, prev.parent, torch.ones(prev.size, dtype=DTYPE))
                pooled = torch.zeros((g.size, h.shape[1]), dtype=DTYPE).index_add(0, prev.parent, h)
                x = x + pooled / cnt.clamp(min=1.0)[:, None]
            h, rec = self.encoders[i](x, g, next(route) if route else None)
            records.append(rec)
            states.append(h)
        for i in range(L - 2, -1, -1):
            g = inputs.levels[i]
            h = states[i] + h[g.parent]
            h, rec = self.decoders[i](h, g, next(route) if route else None)
            records.append(rec)
        h = self.norm_out(h)
        sem = h
        for j, layer in enumerate(self.semantic):
            sem = layer(sem)
            if j < len(self.semantic) - 1:
                sem = F.gelu(sem)
        pred_vec = F.normalize(sem, dim=1)
        g1 = inputs.levels[0]
        q = g1.n_real_edges
        a, b = g1.src[:q], g1.dst[:q]
        pair = torch.cat([h[a] * h[b], (h[a] - h[b]) ** 2, g1.edge_feat[:q].abs()], 1)
        logits = self.aff2(F.gelu(self.aff1(pair))).squeeze(1)
        return pred_vec, logits, records


# ---------------------------------------------------------------- losses

def loss_rec(pred, targets, mask=None) -> torch.Tensor:
    """Mean over unmasked superpoints of the mean ``1 - cos`` to each target vector.

    ``pred`` is ``(C,)`` or ``(S, C)``; ``targets`` is ``(3, C)`` or ``(S, 3, C)``.
    """
    pred = torch.as_tensor(pred, dtype=DTYPE)
    targets = torch.as_tensor(targets, dtype=DTYPE)
    if pred.dim() == 1:
        pred, targets = pred[None], targets[None]
    if mask is None:
        mask = torch.ones(pred.shape[0], dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any():
        return pred.sum() * 0.0
    cos = F.cosine_similarity(pred[mask][:, None, :], targets[mask], dim=-1, eps=1e-12)
    return (1.0 - cos).mean()


def loss_triplet(anchor, positive, negative, alpha: float = 0.2) -> torch.Tensor:
    """``max(0, cos(a, n) - cos(a, p) + alpha)`` averaged over rows."""
    a = torch.as_tensor(anchor, dtype=DTYPE)
    p = torch.as_tensor(positive, dtype=DTYPE)
    n = torch.as_tensor(negative, dtype=DTYPE)
    if a.dim() == 1:
        a, p, n = a[None], p[None], n[None]
    if a.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    val = F.cosine_similarity(a, n, dim=1) - F.cosine_similarity(a, p, dim=1) + alpha
    return torch.clamp(val, min=0.0).mean()


def sample_triplets(classes: np.ndarray, rng: np.random.Generator):
    """One random positive and negative per anchor; anchors lacking either are skipped."""
    classes = np.asarray(classes)
    valid = np.flatnonzero(classes >= 0)
    anchors, pos, neg = [], [], []
    for i in valid:
        same = valid[(classes[valid] == classes[i]) & (valid != i)]
        diff = valid[classes[valid] != classes[i]]
        if len(same) == 0 or len(diff) == 0:
            continue
        anchors.append(i)
        pos.append(same[rng.integers(len(same))])
        neg.append(diff[rng.integers(len(diff))])
    as_idx = lambda v: torch.as_tensor(np.array(v, dtype=np.int64))  # noqa: E731
    return as_idx(anchors), as_idx(pos), as_idx(neg)


def loss_affinity(pred_affinity, labels) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p = torch.as_tensor(pred_affinity, dtype=DTYPE).clamp(AFFINITY_CLAMP, 1 - AFFINITY_CLAMP)
    y = torch.as_tensor(labels, dtype=DTYPE)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


@dataclass
class ForwardOutput:
    pred_vec: torch.Tensor
    pred_affinity: torch.Tensor
    gates: List[GateRecord]
    losses: Dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def routing(self) -> List[torch.Tensor]:
        return [g.selected for g in self.gates]

    @property
    def natural_routing(self) -> List[torch.Tensor]:
        return [g.natural for g in self.gates]

    @property
    def gate_stats(self):
        """Per block: slot fractions ``f_e`` and mean probabilities ``P_e``."""
        out = []
        for g in self.gates:
            e = g.probs.shape[1]
            out.append((slot_fractions(g.selected, e).detach().numpy(), g.probs.detach().mean(0).numpy()))
        return out


def forward(model: MoeSuperpointNet, inputs: GraphInputs,
            routing: Optional[Sequence[torch.Tensor]] = None,
            triplets=None, triplet_seed: int = 0) -> ForwardOutput:
    """Run the network and, when targets are present, every loss term."""
    cfg = model.config
    pred_vec, logits, gates = model(inputs, routing)
    out = ForwardOutput(pred_vec, torch.sigmoid(logits), gates)
    bal = torch.stack([g.balance for g in gates]).mean()
    losses = {"balance": bal}
    if inputs.targets is not None:
        losses["rec"] = loss_rec(pred_vec, inputs.targets, inputs.target_mask)
        if triplets is None:
            triplets = sample_triplets(inputs.classes, np.random.default_rng(triplet_seed))
        a, p, n = triplets
        losses["triplet"] = loss_triplet(pred_vec[a], pred_vec[p], pred_vec[n], cfg.margin)
        if len(logits):
            losses["affinity"] = F.binary_cross_entropy_with_logits(logits, inputs.affinity_labels)
        else:
            losses["affinity"] = logits.sum() * 0.0
        losses["total"] = (cfg.w_rec * losses["rec"] + cfg.w_tri * losses["triplet"]
                           + cfg.w_bal * bal + cfg.w_aff * losses["affinity"])
    else:
        losses["total"] = cfg.w_bal * bal
    out.losses = losses
    return out


# ---------------------------------------------------------------- gradients

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst: Optional[tuple] = None


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               eps: float = 1e-5, max_checks: int = 1000, seed: int = 0,
               selection_fn: Optional[Callable[[], object]] = None,
               abs_floor: float = 1e-6) -> GradCheckResult:
    """Compare autograd gradients with central differences on sampled entries.

    ``selection_fn`` returns a discrete routing signature; entries whose
    perturbation changes it sit on a routing boundary and are skipped.
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("gradient checks require double precision")
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(max_checks, total), replace=False)
    flat.sort()
    offsets = np.r_[0, np.cumsum(sizes)]
    base_sel = selection_fn() if selection_fn else None
    worst, worst_at, excluded, checked = 0.0, None, 0, 0
    with torch.no_grad():
        for f in flat:
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            j = int(f - offsets[pi])
            view = params[pi].view(-1)
            orig = view[j].item()
            view[j] = orig + eps
            lp = float(loss_fn())
            sel_p = selection_fn() if selection_fn else None
            view[j] = orig - eps
            lm = float(loss_fn())
            sel_m = selection_fn() if selection_fn else None
            view[j] = orig
            if selection_fn and not (_same(sel_p, base_sel) and _same(sel_m, base_sel)):
                excluded += 1
                continue
            num = (lp - lm) / (2 * eps)
            ana = float(grads[pi].view(-1)[j])
            rel = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (pi, j, ana, num)
    return GradCheckResult(worst, checked, excluded, worst_at)


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, torch.Tensor):
        return torch.equal(a, b)
    return a == b


def model_grad_check(model: MoeSuperpointNet, inputs: GraphInputs, eps: float = 1e-5,
                     max_checks: int = 1000, seed: int = 0) -> GradCheckResult:
    """Gradient check of the total loss with routing and triplets frozen at the base point."""
    with torch.no_grad():
        base = forward(model, inputs, triplet_seed=seed)
    routing = [r.clone() for r in base.routing]
    triplets = sample_triplets(inputs.classes, np.random.default_rng(seed)) if inputs.classes is not None else None
    state = {}

    def loss_fn():
        out = forward(model, inputs, routing=routing, triplets=triplets)
        state["natural"] = [r.clone() for r in out.natural_routing]
        return out.losses["total"]

    def selection():
        return state["natural"]

    params = [p for p in model.parameters()]
    return grad_check(loss_fn, params, eps, max_checks, seed, selection)


# ---------------------------------------------------------------- training

@dataclass
class TrainTrace:
    steps: List[Dict[str, float]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([s[name] for s in self.steps])


def train_toy(model: MoeSuperpointNet, inputs: GraphInputs, steps: int,
              lr: Optional[float] = None) -> TrainTrace:
    """Plain fixed-step gradient descent; one trace row per step (pre-update losses)."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    lr = model.config.lr if lr is None else lr
    trace = TrainTrace()
    params = list(model.parameters())
    for step in range(steps):
        out = forward(model, inputs, triplet_seed=model.config.seed * 1_000_003 + step)
        total = out.losses["total"]
        row = {k: float(v.detach()) for k, v in out.losses.items()}
        row["step"] = step
        trace.steps.append(row)
        if not all(math.isfinite(v) for v in row.values()):
            raise NumericalError(step)
        grads = torch.autograd.grad(total, params, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is not None:
                    p -= lr * g
    return trace


def evaluate_losses(model: MoeSuperpointNet, inputs: GraphInputs, seed: int = 0) -> Dict[str, float]:
    with torch.no_grad():
        out = forward(model, inputs, triplet_seed=seed)
    return {k: float(v) for k, v in out.losses.items()}


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: MoeSuperpointNet, extra: Optional[dict] = None) -> None:
    state = model.state_dict()
    header = json.dumps({"config": asdict(model.config), "extra": extra or {},
                         "tensors": len(state)}, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(model, extra)``; float32 weights are widened to float64."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + hlen])
    pos = 8 + hlen
    state = {}
    for _ in range(header["tensors"]):
        (nlen,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4:pos + 4 + nlen].decode("utf-8")
        pos += 4 + nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
        pos += 4 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        state[name] = torch.as_tensor(arr.astype(np.float64))
    model = MoeSuperpointNet(MoeConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model, header.get("extra", {})


# ---------------------------------------------------------------- toy inputs

def random_hierarchy(n_superpoints: int = 12, levels: int = 2, feat_dim: int = 32,
                     n_classes: int = 2, seed: int = 0) -> SuperpointHierarchy:
    """Small random hierarchy with targets, for gradient checks and property tests.

    Level 1 is a ring with a few random chords; every coarser level halves the
    node count by pairing consecutive nodes.
    """
    from .superpoint import Level, symmetric, undirected

    rng = np.random.default_rng(seed)
    out = []
    n = n_superpoints
    parent = np.arange(n)
    for li in range(levels):
        ring = np.stack([np.arange(n), (np.arange(n) + 1) % n], 1) if n > 1 else np.zeros((0, 2), int)
        chords = rng.integers(0, n, size=(n // 3, 2))
        e = np.concatenate([ring, chords])
        e = undirected(e[e[:, 0] != e[:, 1]]) if len(e) else e
        edges = symmetric(e)
        ef = rng.normal(size=(len(edges), EDGE_DIM))
        out.append(Level(parent, edges, ef, rng.normal(size=(n, GEOM_DIM)),
                         rng.integers(5, 50, size=n)))
        m = max(1, (n + 1) // 2)
        parent = np.arange(n) // 2 if m < n else np.arange(n)
        n = m
    lv = out[0]
    s = lv.size
    targets = rng.normal(size=(s, 3, feat_dim))
    lv.targets = targets / np.linalg.norm(targets, axis=2, keepdims=True)
    lv.target_mask = np.ones(s, dtype=bool)
    lv.target_mask[rng.integers(s)] = False
    lv.majority_class = np.arange(s) % n_classes
    lv.majority_instance = np.arange(s) // 3
    lv.is_thing = lv.majority_class == 0
    return SuperpointHierarchy(out, int(lv.point_count.sum()), 10, levels)
