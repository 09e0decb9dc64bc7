"""Small dense layer set with hand-written reverse-mode gradients.

Activations are plain numpy arrays. Sequence activations have shape
``(..., L, C)``; any leading axes are treated as a batch.  Pooled
activations have shape ``(..., C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when an input does not fit the layer it is fed to."""


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Layer:
    kind = "layer"
    affine = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, x, gy):
        """Return ``(grad_input, {param_name: grad})``."""
        raise NotImplementedError

    def out_dim(self, in_dim: int) -> int:
        return in_dim

    def astype(self, dtype):
        for k, v in self.params.items():
            self.params[k] = v.astype(dtype)
        return self


class Embedding(Layer):
    """Token-id lookup.  ``trainable`` controls whether gradients are produced."""

    kind = "embed"

    def __init__(self, weight: np.ndarray, trainable: bool = True):
        super().__init__()
        self.params["weight"] = weight
        self.trainable = trainable

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def dim(self):
        return self.weight.shape[1]

    def forward(self, x):
        x = np.asarray(x)
        if x.dtype.kind not in "iu":
            raise DimensionError("embedding lookup expects integer token ids")
        if x.size and (x.min() < 0 or x.max() >= self.weight.shape[0]):
            raise DimensionError(f"token id out of range for vocabulary of {self.weight.shape[0]}")
        return self.weight[x]

    def backward(self, x, gy):
        if not self.trainable:
            return None, {}
        g = np.zeros_like(self.weight)
        np.add.at(g, np.asarray(x).reshape(-1), gy.reshape(-1, self.dim))
        return None, {"weight": g}


class Conv1d(Layer):
    """Valid 1-D convolution; weight shape ``(width, in_ch, out_ch)``."""

    kind = "conv"
    affine = True

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        if weight.ndim != 3 or weight.shape[0] < 1:
            raise DimensionError(f"bad conv weight shape {weight.shape}")
        self.params["weight"] = weight
        self.params["bias"] = bias

    @classmethod
    def init(cls, rng, in_ch, out_ch, width, dtype=np.float32):
        w = glorot(rng, (width, in_ch, out_ch), width * in_ch, width * out_ch, dtype)
        return cls(w, np.zeros(out_ch, dtype=dtype))

    @property
    def width(self):
        return self.params["weight"].shape[0]

    def out_dim(self, in_dim):
        if in_dim != self.params["weight"].shape[1]:
            raise DimensionError(f"conv expects {self.params['weight'].shape[1]} channels, got {in_dim}")
        return self.params["weight"].shape[2]

    def _windows(self, x):
        w, cin, _ = self.params["weight"].shape
        if x.shape[-1] != cin:
            raise DimensionError(f"conv expects {cin} channels, got {x.shape[-1]}")
        if x.shape[-2] < w:
            raise DimensionError(f"sequence length {x.shape[-2]} shorter than kernel width {w}")
        # (..., L', C, w) -> (..., L', w, C)
        return np.swapaxes(np.lib.stride_tricks.sliding_window_view(x, w, axis=-2), -1, -2)

    def linear_part(self, x):
        win = self._windows(x)
        return np.einsum("...tjc,jco->...to", win, self.params["weight"])

    def forward(self, x):
        return self.linear_part(x) + self.params["bias"]

    def abs_part(self, r):
        win = self._windows(r)
        return np.einsum("...tjc,jco->...to", win, np.abs(self.params["weight"]))

    def backward(self, x, gy, abs_weight=False, gx_needed=True):
        weight = np.abs(self.params["weight"]) if abs_weight else self.params["weight"]
        w = weight.shape[0]
        win = self._windows(x)
        gw = np.einsum("ntjc,nto->jco", win.reshape((-1,) + win.shape[-3:]),
                       gy.reshape((-1,) + gy.shape[-2:]))
        gb = gy.reshape(-1, gy.shape[-1]).sum(axis=0)
        gx = None
        if gx_needed:
            gx = np.zeros(x.shape, dtype=np.result_type(x, gy))
            L_out = gy.shape[-2]
            for j in range(w):
                gx[..., j:j + L_out, :] += gy @ weight[j].T
        return gx, {"weight": gw, "bias": gb}


class Linear(Layer):
    """Dense layer; weight shape ``(in, out)``."""

    kind = "linear"
    affine = True

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise DimensionError(f"inconsistent linear shapes {weight.shape} / {bias.shape}")
        self.params["weight"] = weight
        self.params["bias"] = bias

    @classmethod
    def init(cls, rng, n_in, n_out, dtype=np.float32):
        return cls(glorot(rng, (n_in, n_out), n_in, n_out, dtype), np.zeros(n_out, dtype=dtype))

    def out_dim(self, in_dim):
        if in_dim != self.params["weight"].shape[0]:
            raise DimensionError(f"linear expects {self.params['weight'].shape[0]} inputs, got {in_dim}")
        return self.params["weight"].shape[1]

    def _check(self, x):
        if x.shape[-1] != self.params["weight"].shape[0]:
            raise DimensionError(
                f"linear expects {self.params['weight'].shape[0]} inputs, got {x.shape[-1]}")

    def linear_part(self, x):
        self._check(x)
        return x @ self.params["weight"]

    def forward(self, x):
        return self.linear_part(x) + self.params["bias"]

    def abs_part(self, r):
        self._check(r)
        return r @ np.abs(self.params["weight"])

    def backward(self, x, gy, abs_weight=False, gx_needed=True):
        weight = np.abs(self.params["weight"]) if abs_weight else self.params["weight"]
        gw = x.reshape(-1, x.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
        gb = gy.reshape(-1, gy.shape[-1]).sum(axis=0)
        gx = gy @ weight.T if gx_needed else None
        return gx, {"weight": gw, "bias": gb}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, x, gy):
        return gy * (x > 0), {}


class AvgPool(Layer):
    """Mean over the sequence axis (valid positions only)."""

    kind = "pool"

    def forward(self, x):
        if x.ndim < 2:
            raise DimensionError("avg-pool expects a sequence input")
        return x.mean(axis=-2)

    def backward(self, x, gy):
        L = x.shape[-2]
        return np.broadcast_to(gy[..., None, :] / L, x.shape).copy(), {}


@dataclass
class Network:
    """Ordered layer stack.  An optional leading :class:`Embedding` maps ids to vectors.

    Networks without an embedding layer take embedded input; ``lookup`` then
    holds the (frozen) embedding matrix used to embed token ids.
    """

    layers: list
    class_count: int
    arch: str = "custom"
    lookup: np.ndarray | None = None
    descriptor: str = ""
    input_dim: int = field(init=False)

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("network has no layers")
        body = self.body
        if not body or not isinstance(body[-1], Linear):
            raise DimensionError("final layer must be linear")
        dim = self.layers[0].dim if self.embedding is not None else body[0].params["weight"].shape[-2]
        self.input_dim = dim
        sequence = True
        for layer in body:
            if isinstance(layer, Embedding):
                raise DimensionError("embedding may only be the first layer")
            if isinstance(layer, Conv1d) and not sequence:
                raise DimensionError("conv after pooling")
            if isinstance(layer, AvgPool):
                sequence = False
            dim = layer.out_dim(dim)
        if dim != self.class_count:
            raise DimensionError(f"final layer has {dim} outputs, expected {self.class_count}")

    @property
    def embedding(self) -> Embedding | None:
        return self.layers[0] if isinstance(self.layers[0], Embedding) else None

    @property
    def body(self) -> list:
        return self.layers[1:] if self.embedding is not None else self.layers

    @property
    def dtype(self):
        return self.body[-1].params["weight"].dtype

    def embedding_matrix(self) -> np.ndarray:
        if self.embedding is not None:
            return self.embedding.weight
        if self.lookup is None:
            raise DimensionError("network has no embedding layer and no lookup matrix attached")
        return self.lookup

    def embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if self.embedding is not None:
            return self.embedding.forward(tokens)
        return self.embedding_matrix()[tokens].astype(self.dtype, copy=False)

    def min_length(self) -> int:
        return max([l.width for l in self.body if isinstance(l, Conv1d)], default=1)

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Embedding) and not layer.trainable:
                continue
            for k, v in layer.params.items():
                out[f"{i}.{k}"] = v
        return out

    def all_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def load_params(self, values: dict[str, np.ndarray]):
        for name, v in values.items():
            i, k = name.split(".", 1)
            layer = self.layers[int(i)]
            if layer.params[k].shape != v.shape:
                raise DimensionError(f"parameter {name}: shape {v.shape} != {layer.params[k].shape}")
            layer.params[k] = np.array(v, dtype=layer.params[k].dtype)

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        if self.lookup is not None:
            self.lookup = self.lookup.astype(dtype)
        return self


@dataclass
class Trace:
    acts: list          # acts[0] is the embedded input, acts[i+1] the output of body[i]
    tokens: np.ndarray | None = None

    @property
    def logits(self):
        return self.acts[-1]


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    input: np.ndarray | None = None


def forward(net: Network, x, record: bool = False):
    """Run the network.  Integer input is embedded first.

    Returns the logits, or a :class:`Trace` when ``record`` is set.
    """
    x = np.asarray(x)
    tokens = None
    if x.dtype.kind in "iu":
        tokens = x
        x = net.embed(x)
    acts = [x]
    for layer in net.body:
        x = layer.forward(x)
        acts.append(x)
    if record:
        return Trace(acts, tokens)
    return x


def backward(net: Network, trace: Trace, g_logits) -> Gradients:
    if trace is None or not isinstance(trace, Trace):
        raise ValueError("backward needs a trace recorded by forward(record=True)")
    g = np.asarray(g_logits, dtype=trace.logits.dtype)
    grads: dict[str, np.ndarray] = {}
    offset = 1 if net.embedding is not None else 0
    for i in range(len(net.body) - 1, -1, -1):
        layer = net.body[i]
        x = trace.acts[i]
        g, pg = layer.backward(x, g)
        for k, v in pg.items():
            grads[f"{i + offset}.{k}"] = v
    emb = net.embedding
    if emb is not None and emb.trainable and trace.tokens is not None:
        _, pg = emb.backward(trace.tokens, g)
        grads["0.weight"] = pg["weight"]
    return Gradients(grads, g)


def accumulate(total: dict, part: dict, scale: float = 1.0):
    for k, v in part.items():
        if k in total:
            total[k] = total[k] + scale * v
        else:
            total[k] = scale * v
    return total


def log_softmax(logits):
    logits = np.asarray(logits)
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


class NonFiniteError(ValueError):
    pass


def cross_entropy(logits, label, grad: bool = False):
    """``-log softmax(logits)[label]``; optionally with the logit gradient.

    ``logits`` may carry leading batch axes, in which case ``label`` is an
    integer array and per-example losses are returned.
    """
    logits = np.asarray(logits)
    label = np.asarray(label)
    n = logits.shape[-1]
    if np.any(label < 0) or np.any(label >= n):
        raise ValueError(f"label out of range for {n} classes")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits")
    lsm = log_softmax(logits)
    loss = -np.take_along_axis(lsm, label[..., None], axis=-1)[..., 0]
    if not grad:
        return loss
    g = np.exp(lsm)
    onehot = np.zeros_like(g)
    np.put_along_axis(onehot, label[..., None], 1.0, axis=-1)
    return loss, g - onehot


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict:
    """One bias-corrected Adam update.  ``params`` arrays are updated in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params
