"""Named architectures and a compact architecture descriptor format.

A descriptor is a comma-separated layer list, e.g.::

    embed=70:150,conv=100:5,relu,pool,linear=2

``embed=V:D`` (trainable lookup) or ``input=D`` (pre-embedded input) must
come first; ``conv=C:W`` is a valid convolution with C kernels of width W;
``linear=N`` a dense layer with N outputs.
"""

from __future__ import annotations

import numpy as np

from .nn import AvgPool, Conv1d, DimensionError, Embedding, Linear, Network, ReLU

ARCHS = ("sst-word", "sst-char", "ag-char")


def arch_descriptor(name: str, vocab_size: int = 0, input_dim: int = 300, embed_dim: int = 150,
                    channels: int = 100, width: int | None = None, hidden: int = 100,
                    classes: int | None = None) -> str:
    if name == "sst-word":
        w = width or 5
        return f"input={input_dim},conv={channels}:{w},relu,pool,linear={classes or 2}"
    if name == "sst-char":
        w = width or 5
        return f"embed={vocab_size}:{embed_dim},conv={channels}:{w},relu,pool,linear={classes or 2}"
    if name == "ag-char":
        w = width or 10
        return (f"embed={vocab_size}:{embed_dim},conv={channels}:{w},relu,pool,"
                f"linear={hidden},relu,linear={hidden},relu,linear={classes or 4}")
    raise ValueError(f"unknown architecture {name!r}; valid names: {', '.join(ARCHS)} or a descriptor")


def parse_descriptor(desc: str) -> list:
    out = []
    for part in desc.split(","):
        part = part.strip()
        if not part:
            raise ValueError(f"empty layer in descriptor {desc!r}")
        kind, _, arg = part.partition("=")
        nums = tuple(int(a) for a in arg.split(":")) if arg else ()
        expected = {"embed": 2, "input": 1, "conv": 2, "linear": 1, "relu": 0, "pool": 0}
        if kind not in expected or len(nums) != expected[kind]:
            raise ValueError(f"bad layer spec {part!r}")
        out.append((kind, nums))
    return out


def format_descriptor(layers: list) -> str:
    return ",".join(k + ("=" + ":".join(map(str, n)) if n else "") for k, n in layers)


def build_from_descriptor(desc: str, seed: int = 0, dtype=np.float32, arch: str | None = None,
                          lookup: np.ndarray | None = None) -> Network:
    spec = parse_descriptor(desc)
    rng = np.random.default_rng(seed)
    layers = []
    head, *rest = spec
    if head[0] == "embed":
        V, D = head[1]
        layers.append(Embedding(rng.normal(0, 1, size=(V, D)).astype(dtype), trainable=True))
        dim = D
    elif head[0] == "input":
        dim = head[1][0]
    else:
        raise ValueError("descriptor must start with embed= or input=")
    classes = None
    for kind, nums in rest:
        if kind == "conv":
            layers.append(Conv1d.init(rng, dim, nums[0], nums[1], dtype))
            dim = nums[0]
        elif kind == "linear":
            layers.append(Linear.init(rng, dim, nums[0], dtype))
            dim = classes = nums[0]
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "pool":
            layers.append(AvgPool())
        else:
            raise ValueError(f"{kind} may only start a descriptor")
    if classes is None:
        raise DimensionError("descriptor has no linear output layer")
    net = Network(layers, classes, arch=arch or desc, lookup=lookup, descriptor=desc)
    if lookup is not None and lookup.shape[1] != net.input_dim:
        raise DimensionError(f"embedding dim {lookup.shape[1]} != model input dim {net.input_dim}")
    return net


def build_model(arch_name: str, seed: int = 0, dtype=np.float32, lookup=None, **sizes) -> Network:
    """``sst-word``, ``sst-char``, ``ag-char`` or a raw descriptor string."""
    if arch_name in ARCHS:
        if arch_name == "sst-word" and lookup is not None:
            sizes.setdefault("input_dim", lookup.shape[1])
        desc = arch_descriptor(arch_name, **sizes)
        return build_from_descriptor(desc, seed, dtype, arch=arch_name, lookup=lookup)
    if "=" in arch_name:
        return build_from_descriptor(arch_name, seed, dtype, lookup=lookup)
    arch_descriptor(arch_name)  # raises with the list of valid names
