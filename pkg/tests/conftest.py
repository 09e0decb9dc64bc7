import numpy as np
import pytest

from textcert.data import Example
from textcert.models import build_model


def tiny_net(arch="sst-char", seed=0, dtype=np.float64, vocab=9, **sizes):
    defaults = {"embed_dim": 4, "channels": 3, "hidden": 5}
    if arch == "sst-word":
        defaults = {"input_dim": 4, "channels": 3}
        rng = np.random.default_rng(seed + 100)
        lookup = rng.normal(size=(vocab, 4)).astype(dtype)
        return build_model(arch, seed=seed, dtype=dtype, lookup=lookup, **{**defaults, **sizes})
    return build_model(arch, seed=seed, dtype=dtype, vocab_size=vocab, **{**defaults, **sizes})


def jitter_biases(net, rng, scale=0.3):
    """Nonzero biases keep gradient checks away from ReLU kinks."""
    for layer in net.layers:
        if "bias" in layer.params:
            b = layer.params["bias"]
            layer.params["bias"] = (b + rng.normal(scale=scale, size=b.shape)).astype(b.dtype)
    return net


def random_table(rng, vocab=9, max_options=2):
    table = {}
    for t in range(1, vocab):
        k = int(rng.integers(0, max_options + 1))
        opts = sorted(set(int(x) for x in rng.integers(1, vocab, size=k)) - {t})
        if opts:
            table[t] = tuple(opts)
    return table


def random_examples(rng, n, length, vocab=9, classes=2):
    return [Example(rng.integers(1, vocab, size=length), int(rng.integers(classes))) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records an acceptance verdict and asserts it.

    A test that errors before recording is reported as a failure.
    """
    table = request.config.stash.setdefault(_CRITERIA, {})
    seen = []

    def record(n, ok, detail):
        seen.append(n)
        table[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"

    yield record
    num = getattr(request.function, "criterion_number", None)
    if num is not None and num not in seen:
        table[num] = (False, "error before verdict")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_CRITERIA, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        ok, detail = table[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
