"""Interval bounds over the network for simplex-shaped input regions.

The first block (an affine layer plus its monotone activation) is bounded
by evaluating it at every simplex vertex and taking the elementwise
min/max.  Later layers are bounded in closed form: center/radius for
affine maps, endpoint evaluation for monotone ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import AvgPool, Conv1d, Linear, Network, ReLU
from .perturb import SimplexVertices


@dataclass
class OpCounter:
    """Work accounting.  ``macs`` counts scalar multiply-adds in first-layer
    evaluation; ``bound_passes`` counts passes of one bound (lower or upper)
    through layers 2..K; ``forwards`` counts full forward passes."""

    macs: int = 0
    vertex_evals: int = 0
    bound_passes: int = 0
    forwards: int = 0


@dataclass
class Interval:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise ValueError(f"bound shapes differ: {self.lower.shape} vs {self.upper.shape}")

    @classmethod
    def point(cls, x):
        x = np.asarray(x)
        return cls(x.copy(), x.copy())

    def check(self, atol=0.0):
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise FloatingPointError("non-finite bounds")
        if np.any(self.lower > self.upper + atol):
            raise ValueError("lower bound exceeds upper bound")
        return self

    def contains(self, x, slack=0.0) -> bool:
        return bool(np.all(self.lower - slack <= x) and np.all(x <= self.upper + slack))

    def within(self, other: "Interval", tol=0.0) -> bool:
        return bool(np.all(other.lower - tol <= self.lower) and np.all(self.upper <= other.upper + tol))


def interval_affine(layer, b: Interval) -> Interval:
    if not getattr(layer, "affine", False):
        raise TypeError(f"{layer.kind} layer is not affine")
    mu = (b.lower + b.upper) / 2
    r = (b.upper - b.lower) / 2
    c = layer.forward(mu)
    rad = layer.abs_part(r)
    return Interval(c - rad, c + rad)


def interval_monotone(layer, b: Interval) -> Interval:
    if not isinstance(layer, (ReLU, AvgPool)):
        raise TypeError(f"{layer.kind} layer is not a supported monotone layer")
    return Interval(layer.forward(b.lower), layer.forward(b.upper))


def interval_layer(layer, b: Interval) -> Interval:
    if getattr(layer, "affine", False):
        return interval_affine(layer, b)
    return interval_monotone(layer, b)


def _first_block(net: Network):
    body = net.body
    if not body[0].affine:
        raise TypeError("first layer must be affine (conv1d or linear)")
    act = body[1] if len(body) > 1 and isinstance(body[1], ReLU) else None
    return body[0], act


def _as_dense(vertices) -> np.ndarray:
    if isinstance(vertices, SimplexVertices):
        return vertices.dense()
    arr = np.asarray(vertices)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def _as_simplex(vertices) -> SimplexVertices:
    if isinstance(vertices, SimplexVertices):
        return vertices
    dense = _as_dense(vertices)
    origin = dense[0]
    pos, rows = [], []
    for v in dense[1:]:
        changed = np.flatnonzero(np.any(v != origin, axis=-1))
        if len(changed) > 1:
            raise ValueError("incremental bounds need vertices that differ from vertex 0 in one position")
        if len(changed) == 0:
            continue
        pos.append(int(changed[0]))
        rows.append(v[changed[0]])
    rows = np.array(rows, dtype=origin.dtype).reshape(len(pos), origin.shape[-1])
    return SimplexVertices(origin, np.array(pos, dtype=np.int64), rows, 1)


def simplex_first_layer_bounds(net: Network, vertices, method: str = "incremental",
                               counter: OpCounter | None = None) -> Interval:
    """Elementwise min/max of the first block over the simplex vertices.

    ``vertices`` is a :class:`SimplexVertices` or an array ``(M+1, L, d)``
    whose entry 0 is the unperturbed sequence.  ``method="naive"`` runs the
    block on every vertex; ``"incremental"`` runs it once on vertex 0 and
    patches only the outputs whose receptive field covers the changed row.
    """
    layer, act = _first_block(net)
    if isinstance(vertices, SimplexVertices):
        n_vertices = vertices.M + 1
    else:
        n_vertices = len(_as_dense(vertices))
    if n_vertices == 0:
        raise ValueError("empty vertex list")
    if counter is not None:
        counter.vertex_evals += n_vertices

    if method == "naive" or not isinstance(layer, Conv1d):
        dense = _as_dense(vertices)
        outs = []
        for v in dense:
            outs.append(layer.forward(v))
            if counter is not None:
                counter.macs += _affine_macs(layer, v)
        outs = np.stack(outs)
        lo, hi = outs.min(axis=0), outs.max(axis=0)
    elif method == "incremental":
        sv = _as_simplex(vertices)
        w, d, C = layer.params["weight"].shape
        a0 = layer.forward(sv.origin)
        L_out = a0.shape[0]
        lo_off = np.zeros_like(a0)
        hi_off = np.zeros_like(a0)
        if sv.M:
            diff = sv.rows - sv.origin[sv.positions]
            U = np.einsum("md,jdc->mjc", diff, layer.params["weight"])
            t = sv.positions[:, None] - np.arange(w)[None, :]
            ok = (t >= 0) & (t < L_out)
            np.minimum.at(lo_off, t[ok], U[ok])
            np.maximum.at(hi_off, t[ok], U[ok])
        lo, hi = a0 + lo_off, a0 + hi_off
        if counter is not None:
            counter.macs += L_out * w * d * C + sv.M * w * d * C
    else:
        raise ValueError(f"unknown method {method!r}")

    b = Interval(lo, hi)
    if act is not None:
        b = interval_monotone(act, b)
    return b


def _affine_macs(layer, x) -> int:
    W = layer.params["weight"]
    if isinstance(layer, Conv1d):
        w, d, C = W.shape
        return (x.shape[-2] - w + 1) * w * d * C
    return int(np.prod(x.shape[:-1])) * W.size


def rest_layers(net: Network):
    """Layers after the first block."""
    layer, act = _first_block(net)
    return net.body[2:] if act is not None else net.body[1:]


def propagate(net: Network, first: Interval, counter: OpCounter | None = None) -> Interval:
    """Closed-form bounds from the first block's output to the logits."""
    b = first
    for layer in rest_layers(net):
        if not isinstance(layer, (Conv1d, Linear, ReLU, AvgPool)):
            raise TypeError(f"unsupported layer kind {layer.kind}")
        b = interval_layer(layer, b)
    if counter is not None:
        counter.bound_passes += 2
    return b


def logit_bounds(net: Network, vertices, counter: OpCounter | None = None,
                 method: str = "incremental") -> Interval:
    return propagate(net, simplex_first_layer_bounds(net, vertices, method, counter), counter)


@dataclass
class WorstCaseLogits:
    values: np.ndarray
    true_class: int


def constraint_vectors(n_classes: int, true_class: int) -> np.ndarray:
    """Rows ``e_y - e_true`` for every competing class ``y``."""
    rows = []
    for y in range(n_classes):
        if y == true_class:
            continue
        c = np.zeros(n_classes)
        c[y], c[true_class] = 1.0, -1.0
        rows.append(c)
    return np.array(rows).reshape(-1, n_classes)


def worst_case_logits(b: Interval, true_class) -> WorstCaseLogits:
    """True-class logit at its lower bound, all others at their upper bounds.

    Works on single examples ``(n,)`` or batches ``(B, n)``.
    """
    true_class = np.asarray(true_class)
    n = b.upper.shape[-1]
    is_true = np.arange(n) == true_class[..., None]
    return WorstCaseLogits(np.where(is_true, b.lower, b.upper), true_class)


def verified_margin(b: Interval, true_class: int) -> tuple[float, bool]:
    """Largest ``upper[y] - lower[true]`` over competitors; verified iff < 0."""
    n = b.upper.shape[-1]
    others = [y for y in range(n) if y != true_class]
    margin = float(np.max(b.upper[others]) - b.lower[true_class])
    return margin, margin < 0


# ---------------------------------------------------------------------------
# differentiable path used by verifiable training
# ---------------------------------------------------------------------------

@dataclass
class SimplexCache:
    x0: np.ndarray
    offs: np.ndarray
    arg_lo: np.ndarray
    arg_hi: np.ndarray
    tj: np.ndarray
    jj: np.ndarray
    O: int


def simplex_conv_bounds(conv: Conv1d, x0: np.ndarray, offs: np.ndarray):
    """Batched pre-activation vertex bounds for a conv layer.

    ``x0``: ``(B, L, d)`` originals; ``offs``: ``(B, L, O, d)`` dilated row
    offsets, zero for unused option slots.  Returns ``(lower, upper, cache)``.
    Ties pick the lowest vertex index, vertex 0 first.
    """
    W = conv.params["weight"]
    w = W.shape[0]
    B, L, O, d = offs.shape
    a0 = conv.forward(x0)
    L_out = a0.shape[-2]
    U = np.einsum("blod,jdc->bljoc", offs, W)            # (B, L, w, O, C)
    tj = np.arange(L_out)[:, None] + np.arange(w)[None, :]
    jj = np.broadcast_to(np.arange(w)[None, :], tj.shape)
    cand = U[:, tj, jj].reshape(B, L_out, w * O, -1)      # (B, L', w*O, C)
    zero = np.zeros((B, L_out, 1, cand.shape[-1]), dtype=cand.dtype)
    cand = np.concatenate([zero, cand], axis=2)
    arg_lo = cand.argmin(axis=2)
    arg_hi = cand.argmax(axis=2)
    lo = a0 + np.take_along_axis(cand, arg_lo[:, :, None], axis=2)[:, :, 0]
    hi = a0 + np.take_along_axis(cand, arg_hi[:, :, None], axis=2)[:, :, 0]
    return lo, hi, SimplexCache(x0, offs, arg_lo, arg_hi, tj, jj, O)


def simplex_conv_bounds_backward(conv: Conv1d, cache: SimplexCache, g_lo, g_hi):
    """Gradients of the vertex bounds w.r.t. conv params, ``x0`` and ``offs``."""
    W = conv.params["weight"]
    w = W.shape[0]
    B, L, O, d = cache.offs.shape
    L_out, C = g_lo.shape[-2:]
    g_x0, pg = conv.backward(cache.x0, g_lo + g_hi)
    g_cand = np.zeros((B, L_out, 1 + w * O, C), dtype=g_lo.dtype)
    np.put_along_axis(g_cand, cache.arg_lo[:, :, None], g_lo[:, :, None], axis=2)
    hi_part = np.zeros_like(g_cand)
    np.put_along_axis(hi_part, cache.arg_hi[:, :, None], g_hi[:, :, None], axis=2)
    g_cand += hi_part
    gU = np.zeros((B, L, w, O, C), dtype=g_lo.dtype)
    gU[:, cache.tj, cache.jj] = g_cand[:, :, 1:].reshape(B, L_out, w, O, C)
    pg["weight"] = pg["weight"] + np.einsum("blod,bljoc->jdc", cache.offs, gU)
    g_offs = np.einsum("bljoc,jdc->blod", gU, W)
    return g_x0, g_offs, pg


@dataclass
class IntervalTrace:
    inputs: list      # Interval fed to each rest layer
    output: Interval


def propagate_recorded(layers, first: Interval) -> IntervalTrace:
    b = first
    inputs = []
    for layer in layers:
        inputs.append(b)
        b = interval_layer(layer, b)
    return IntervalTrace(inputs, b)


def propagate_backward(layers, trace: IntervalTrace, g_lo, g_hi, offset_of):
    """Backprop through closed-form interval propagation.

    ``offset_of(layer_index_in_layers)`` gives the parameter-name prefix.
    Returns ``(g_lower_in, g_upper_in, param_grads)``.
    """
    grads = {}
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        b = trace.inputs[i]
        prefix = offset_of(i)
        if getattr(layer, "affine", False):
            mu = (b.lower + b.upper) / 2
            r = (b.upper - b.lower) / 2
            g_c_out = g_lo + g_hi
            g_r_out = g_hi - g_lo
            g_mu, pc = layer.backward(mu, g_c_out)
            g_r, pr = layer.backward(r, g_r_out, abs_weight=True)
            gw = pc["weight"] + np.sign(layer.params["weight"]) * pr["weight"]
            grads[f"{prefix}.weight"] = gw
            grads[f"{prefix}.bias"] = pc["bias"]
            g_lo, g_hi = (g_mu - g_r) / 2, (g_mu + g_r) / 2
        else:
            g_lo, _ = layer.backward(b.lower, g_lo)
            g_hi, _ = layer.backward(b.upper, g_hi)
    return g_lo, g_hi, grads
