"""Greedy first-order (HotFlip-style) substitution attack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Network, backward, cross_entropy, forward
from .perturb import PerturbationSet


@dataclass
class AttackResult:
    tokens: np.ndarray
    flips: list = field(default_factory=list)     # (position, replacement) in order applied
    loss: float = 0.0
    clean_loss: float = 0.0
    changed: bool = False


def hotflip(net: Network, pset: PerturbationSet, label: int, delta: int | None = None) -> AttackResult:
    """Search up to ``delta`` distinct-position flips that increase the loss.

    Each round scores every unused elementary substitution by the
    first-order loss change ``g[pos] . (e_new - e_cur)`` and tries the best
    positive one (lowest index on ties).  A flip is kept only if the
    re-evaluated loss actually increased; otherwise the search stops.
    """
    delta = pset.delta if delta is None else delta
    current = np.array(pset.tokens, copy=True)
    E = net.embedding_matrix()
    elems = pset.elems
    pos = np.array([e.position for e in elems], dtype=np.int64)
    rep = np.array([e.replacement for e in elems], dtype=np.int64)

    logits = forward(net, current)
    loss = float(cross_entropy(logits, label))
    result = AttackResult(current, [], loss, loss, False)
    used = set()
    for _ in range(delta):
        if not elems:
            break
        trace = forward(net, current, record=True)
        if int(np.argmax(trace.logits)) != label:
            break
        loss_val, g_logits = cross_entropy(trace.logits, label, grad=True)
        g_in = backward(net, trace, g_logits).input
        free = np.array([p not in used for p in pos.tolist()])
        scores = np.einsum("md,md->m", g_in[pos], E[rep] - E[current[pos]])
        scores = np.where(free, scores, -np.inf)
        best = int(np.argmax(scores))
        if not scores[best] > 0:
            break
        trial = current.copy()
        trial[pos[best]] = rep[best]
        trial_loss = float(cross_entropy(forward(net, trial), label))
        if not trial_loss > loss:
            break
        current, loss = trial, trial_loss
        used.add(int(pos[best]))
        result.flips.append((int(pos[best]), int(rep[best])))
    result.tokens = current
    result.loss = loss
    result.changed = int(np.argmax(forward(net, current))) != label
    return result
