"""Training objectives (normal, augmentation, adversarial, verifiable) and the loop."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .attack import hotflip
from .bounds import (Interval, _first_block, interval_monotone, propagate_recorded,
                     propagate_backward, rest_layers, simplex_conv_bounds,
                     simplex_conv_bounds_backward, worst_case_logits)
from .nn import (AdamState, Conv1d, Network, NonFiniteError, accumulate, adam_step, backward,
                 cross_entropy, forward)
from .perturb import elementary_perturbations, padded_deltas, sample_perturbation
from .verify import ibp_verify

log = logging.getLogger(__name__)

REGIMES = ("normal", "augmentation", "adversarial", "verifiable")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    regime: str = "normal"
    delta: int = 3
    kappa_start: float = 1.0
    kappa_end: float = 0.25
    warmup_fraction: float = 0.5
    mix: float = 0.5
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not (0 <= self.kappa_end <= 1 and 0 <= self.kappa_start <= 1):
            raise ValueError("kappa endpoints must lie in [0, 1]")
        if not 0 <= self.mix <= 1:
            raise ValueError("interpolation weight must lie in [0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


def kappa_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp from ``kappa_start`` to ``kappa_end`` over the warmup, then flat."""
    warm = cfg.warmup_fraction * total_steps
    if warm <= 0:
        return cfg.kappa_end
    frac = min(1.0, step / warm)
    return cfg.kappa_start + (cfg.kappa_end - cfg.kappa_start) * frac


def _groups(token_arrays):
    by_len = defaultdict(list)
    for i, t in enumerate(token_arrays):
        by_len[len(t)].append(i)
    return [by_len[k] for k in sorted(by_len)]


def weighted_ce(net: Network, token_arrays, labels, weights):
    """``sum_i weights[i] * CE(net(tokens_i), labels[i])`` and its parameter gradients."""
    total, grads = 0.0, {}
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    for idx in _groups(token_arrays):
        toks = np.stack([token_arrays[i] for i in idx])
        trace = forward(net, toks, record=True)
        loss, g = cross_entropy(trace.logits, labels[idx], grad=True)
        w = weights[idx]
        total += float(np.sum(w * loss))
        accumulate(grads, backward(net, trace, g * w[:, None].astype(g.dtype)).params)
    return total, grads


def loss_normal(net, batch):
    n = len(batch)
    return weighted_ce(net, [ex.tokens for ex in batch], [ex.label for ex in batch], [1.0 / n] * n)


def loss_augmentation(net, batch, table, delta, rng, mix=0.5):
    toks, labels, weights = [], [], []
    n = len(batch)
    for ex in batch:
        pset = elementary_perturbations(ex.tokens, table, delta, getattr(ex, "perturbable", None))
        z, _ = sample_perturbation(pset, rng)
        toks += [ex.tokens, z]
        labels += [ex.label, ex.label]
        weights += [(1 - mix) / n, mix / n]
    return weighted_ce(net, toks, labels, weights)


def loss_adversarial(net, batch, table, delta, mix=0.5):
    toks, labels, weights = [], [], []
    n = len(batch)
    for ex in batch:
        pset = elementary_perturbations(ex.tokens, table, delta, getattr(ex, "perturbable", None))
        adv = hotflip(net, pset, ex.label, delta)
        toks += [ex.tokens, adv.tokens]
        labels += [ex.label, ex.label]
        weights += [(1 - mix) / n, mix / n]
    return weighted_ce(net, toks, labels, weights)


def loss_verifiable(net: Network, batch, table, delta: int, kappa: float, return_parts: bool = False):
    """``kappa * CE(logits) + (1 - kappa) * CE(worst-case logits)``, averaged over the batch."""
    if not 0 <= kappa <= 1:
        raise ValueError("kappa must lie in [0, 1]")
    n = len(batch)
    conv, act = _first_block(net)
    if not isinstance(conv, Conv1d):
        raise TypeError("verifiable training needs a conv first layer")
    rest = rest_layers(net)
    idx_of = {id(l): i for i, l in enumerate(net.layers)}
    emb = net.embedding
    emb_trainable = emb is not None and emb.trainable
    E = net.embedding_matrix()
    total, grads = 0.0, {}
    parts = {"normal": [], "spec": []}
    toks_all = [ex.tokens for ex in batch]
    for idx in _groups(toks_all):
        exs = [batch[i] for i in idx]
        toks = np.stack([ex.tokens for ex in exs])
        labels = np.array([ex.label for ex in exs])
        trace = forward(net, toks, record=True)
        l_norm, g_norm = cross_entropy(trace.logits, labels, grad=True)

        psets = [elementary_perturbations(ex.tokens, table, max(delta, 1), getattr(ex, "perturbable", None))
                 for ex in exs]
        padded = [padded_deltas(p, E, delta) for p in psets]
        O = max(p[0].shape[1] for p in padded)
        B, L = toks.shape
        d = E.shape[1]
        offs = np.zeros((B, L, O, d), dtype=trace.acts[0].dtype)
        reps = np.full((B, L, O), -1, dtype=np.int64)
        for b, (o, _, r) in enumerate(padded):
            offs[b, :, :o.shape[1]] = o
            reps[b, :, :r.shape[1]] = r
        if delta == 0:
            offs[:] = 0
        x0 = trace.acts[0]
        lo, hi, cache = simplex_conv_bounds(conv, x0, offs)
        pre = Interval(lo, hi)
        first = interval_monotone(act, pre) if act is not None else pre
        itrace = propagate_recorded(rest, first)
        wc = worst_case_logits(itrace.output, labels).values
        l_spec, g_spec = cross_entropy(wc, labels, grad=True)

        # same association as weighted_ce, so kappa == 1 reproduces loss_normal exactly
        total += float(np.sum((kappa / n) * l_norm + ((1 - kappa) / n) * l_spec))
        parts["normal"] += l_norm.tolist()
        parts["spec"] += l_spec.tolist()

        g_norm = g_norm * (kappa / n)
        gn = backward(net, trace, g_norm.astype(trace.logits.dtype))
        accumulate(grads, gn.params)
        if kappa == 1:
            continue

        g_spec = (g_spec * ((1 - kappa) / n)).astype(trace.logits.dtype)
        is_true = np.arange(wc.shape[-1]) == labels[:, None]
        g_lo = np.where(is_true, g_spec, 0)
        g_hi = np.where(is_true, 0, g_spec)
        g_lo, g_hi, pg = propagate_backward(rest, itrace, g_lo, g_hi, lambda i: idx_of[id(rest[i])])
        accumulate(grads, pg)
        if act is not None:
            g_lo = g_lo * (pre.lower > 0)
            g_hi = g_hi * (pre.upper > 0)
        g_x0, g_offs, pc = simplex_conv_bounds_backward(conv, cache, g_lo, g_hi)
        ci = idx_of[id(conv)]
        accumulate(grads, {f"{ci}.{k}": v for k, v in pc.items()})
        if emb_trainable and delta > 0:
            gE = np.zeros_like(E)
            np.add.at(gE, toks.reshape(-1), g_x0.reshape(-1, d))
            valid = reps >= 0
            go = g_offs * delta
            np.add.at(gE, reps[valid], go[valid])
            tok_b = np.broadcast_to(toks[:, :, None], reps.shape)
            np.add.at(gE, tok_b[valid], -go[valid])
            accumulate(grads, {"0.weight": gE})
        elif emb_trainable:
            gE = np.zeros_like(E)
            np.add.at(gE, toks.reshape(-1), g_x0.reshape(-1, d))
            accumulate(grads, {"0.weight": gE})
    if return_parts:
        return total, grads, parts
    return total, grads


def nominal_accuracy(net, examples) -> float:
    correct = 0
    for idx in _groups([ex.tokens for ex in examples]):
        toks = np.stack([examples[i].tokens for i in idx])
        labels = np.array([examples[i].label for i in idx])
        correct += int(np.sum(np.argmax(forward(net, toks), axis=-1) == labels))
    return correct / len(examples)


def adversarial_accuracy(net, examples, table, delta) -> float:
    ok = 0
    for ex in examples:
        if int(np.argmax(forward(net, ex.tokens))) != ex.label:
            continue
        pset = elementary_perturbations(ex.tokens, table, delta, getattr(ex, "perturbable", None))
        ok += not hotflip(net, pset, ex.label, delta).changed
    return ok / len(examples)


def ibp_accuracy(net, examples, table, delta) -> float:
    ok = 0
    for ex in examples:
        pset = elementary_perturbations(ex.tokens, table, delta, getattr(ex, "perturbable", None))
        ok += ibp_verify(net, pset, ex.label).verified
    return ok / len(examples)


def validation_metric(net, cfg: TrainConfig, examples, table) -> dict:
    out = {"nominal": nominal_accuracy(net, examples)}
    if cfg.regime == "adversarial":
        out["adversarial"] = adversarial_accuracy(net, examples, table, cfg.delta)
        out["select"] = out["adversarial"]
    elif cfg.regime == "verifiable":
        out["ibp_verified"] = ibp_accuracy(net, examples, table, cfg.delta)
        out["select"] = out["ibp_verified"]
    else:
        out["select"] = out["nominal"]
    return out


def batch_loss(net, cfg: TrainConfig, batch, table, kappa, rng):
    if cfg.regime == "normal":
        return loss_normal(net, batch)
    if cfg.regime == "augmentation":
        return loss_augmentation(net, batch, table, cfg.delta, rng, cfg.mix)
    if cfg.regime == "adversarial":
        return loss_adversarial(net, batch, table, cfg.delta, cfg.mix)
    return loss_verifiable(net, batch, table, cfg.delta, kappa)


def train(cfg: TrainConfig, train_set, valid_set, net: Network, table, log_file=None):
    """Adam over shuffled mini-batches with early stopping on the regime's
    validation metric.  Returns ``(net, log_records)``; ``net`` holds the
    best-validation parameters."""
    rng = np.random.default_rng(cfg.seed)
    params = net.named_params()
    state = AdamState(lr=cfg.lr)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    best, best_params, stale = -np.inf, None, 0
    records = []
    step = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        kappa = kappa_schedule(step, total_steps, cfg)
        for s in range(steps_per_epoch):
            batch = [train_set[i] for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            kappa = kappa_schedule(step, total_steps, cfg)
            try:
                loss, grads = batch_loss(net, cfg, batch, table, kappa, rng)
            except NonFiniteError as e:
                raise DivergenceError(f"{e} at epoch {epoch}, step {step}") from e
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            adam_step(params, grads, state)
            losses.append(loss)
            step += 1
        metrics = validation_metric(net, cfg, valid_set, table)
        rec = {"epoch": epoch, "kappa": kappa, "train_loss": float(np.mean(losses)),
               "validation": metrics, "wall_time": time.perf_counter() - t0}
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
        log.info("epoch %d loss %.4f val %s", epoch, rec["train_loss"], metrics)
        if metrics["select"] > best:
            best, stale = metrics["select"], 0
            best_params = {k: v.copy() for k, v in net.all_params().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_params is not None:
        net.load_params(best_params)
    return net, records


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
