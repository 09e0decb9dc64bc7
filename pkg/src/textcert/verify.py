"""Bound-based and exhaustive verification, and the four evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import hotflip
from .bounds import Interval, OpCounter, logit_bounds, verified_margin
from .nn import Network, forward
from .perturb import (PerturbationSet, build_simplex, count_space, elementary_perturbations,
                      enumerate_batches)

DEFAULT_ORACLE_BUDGET = 2_000_000

ROBUST = "robust"
NOT_ROBUST = "not-robust"
NOT_ATTEMPTED = "not-attempted"


@dataclass
class IBPResult:
    verified: bool
    margin: float
    bounds: Interval
    vertex_evals: int
    bound_passes: int


def ibp_verify(net: Network, pset: PerturbationSet, label: int, delta: int | None = None,
               counter: OpCounter | None = None) -> IBPResult:
    delta = pset.delta if delta is None else delta
    counter = counter if counter is not None else OpCounter()
    before_v, before_p = counter.vertex_evals, counter.bound_passes
    if delta >= 1 and pset.M:
        vertices = build_simplex(pset, net.embedding_matrix(), delta)
    else:
        vertices = net.embed(pset.tokens)[None]
    b = logit_bounds(net, vertices, counter)
    margin, ok = verified_margin(b, label)
    return IBPResult(ok, margin, b, counter.vertex_evals - before_v, counter.bound_passes - before_p)


@dataclass
class OracleResult:
    status: str
    counterexample: np.ndarray | None = None
    passes: int = 0

    @property
    def robust(self) -> bool:
        return self.status == ROBUST


def exhaustive_verify(net: Network, pset: PerturbationSet, label: int, delta: int | None = None,
                      budget: int = DEFAULT_ORACLE_BUDGET, batch_size: int = 2048) -> OracleResult:
    """Forward every sentence of the space; robust iff all keep ``label``.

    Spaces larger than ``budget`` forward passes are not attempted.
    """
    if delta is not None:
        pset = pset.with_delta(delta)
    if count_space(pset) + 1 > budget:
        return OracleResult(NOT_ATTEMPTED)
    passes = 0
    found = None
    for batch in enumerate_batches(pset, batch_size):
        preds = np.argmax(forward(net, batch), axis=-1)
        passes += len(batch)
        if found is None:
            bad = np.flatnonzero(preds != label)
            if len(bad):
                found = batch[bad[0]].copy()
    return OracleResult(ROBUST if found is None else NOT_ROBUST, found, passes)


@dataclass
class ExampleReport:
    index: int
    label: int
    prediction: int
    nominal_correct: bool
    adv_correct: bool | None
    ibp_verified: bool
    ibp_margin: float
    oracle: str | None
    counterexample: list | None
    space_size: int
    M: int
    forward_passes: int
    adv_flips: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class MetricsSummary:
    delta: int
    n: int
    nominal: float
    adversarial: float | None
    ibp_verified: float
    oracle: float | None
    oracle_attempted: int
    forward_passes: int
    counts: dict = field(default_factory=dict)

    CSV_FIELDS = ("delta", "nominal", "adversarial", "ibp_verified", "oracle",
                  "oracle_attempted", "forward_passes")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MetricsSummary.CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in r.row().items()})
    return buf.getvalue()


def evaluate(net: Network, examples, table, delta: int, attack: bool = True,
             oracle: bool = True, oracle_budget: int = DEFAULT_ORACLE_BUDGET):
    """Nominal, adversarial, IBP-verified and oracle accuracy at budget ``delta``.

    ``examples`` are objects with ``tokens``, ``label`` and optional
    ``perturbable``; ``table`` maps token ids to replacement ids.  An example
    misclassified before perturbation counts as a failure under every metric.
    """
    if not examples:
        raise ValueError("empty evaluation set")
    reports = []
    for i, ex in enumerate(examples):
        pset = elementary_perturbations(ex.tokens, table, delta, getattr(ex, "perturbable", None))
        reports.append(verify_example(net, pset, ex.label, i, attack, oracle, oracle_budget))
    return summarize(reports, delta), reports


def verify_example(net, pset, label, index=0, attack=True, oracle=True,
                   oracle_budget=DEFAULT_ORACLE_BUDGET) -> ExampleReport:
    delta = pset.delta
    pred = int(np.argmax(forward(net, pset.tokens)))
    nominal = pred == label
    ibp = ibp_verify(net, pset, label)
    adv_ok, flips = None, []
    if attack:
        if nominal:
            res = hotflip(net, pset, label, delta)
            adv_ok = not res.changed
            flips = res.flips
        else:
            adv_ok = False
    status, cex, passes = None, None, 0
    if oracle:
        res = exhaustive_verify(net, pset, label, budget=oracle_budget)
        status, passes = res.status, res.passes
        if res.counterexample is not None:
            cex = res.counterexample.tolist()
    return ExampleReport(index, int(label), pred, nominal, adv_ok, bool(ibp.verified and nominal),
                         ibp.margin, status, cex, count_space(pset), pset.M, passes, flips)


def summarize(reports, delta: int) -> MetricsSummary:
    n = len(reports)
    nom = sum(r.nominal_correct for r in reports)
    ibp = sum(r.ibp_verified for r in reports)
    adv_known = [r for r in reports if r.adv_correct is not None]
    adv = sum(r.adv_correct for r in adv_known)
    attempted = [r for r in reports if r.oracle in (ROBUST, NOT_ROBUST)]
    orc = sum(r.oracle == ROBUST for r in attempted)
    counts = {"n": n, "nominal": nom, "adversarial": adv if adv_known else None,
              "ibp_verified": ibp, "oracle": orc, "oracle_attempted": len(attempted),
              "oracle_excluded": sum(r.oracle == NOT_ATTEMPTED for r in reports)}
    return MetricsSummary(
        delta=delta, n=n, nominal=nom / n,
        adversarial=adv / len(adv_known) if adv_known else None,
        ibp_verified=ibp / n,
        oracle=orc / len(attempted) if attempted else None,
        oracle_attempted=len(attempted),
        forward_passes=sum(r.forward_passes for r in reports),
        counts=counts)


def sweep(net: Network, examples, table, deltas, attack: bool = True,
          oracle_budget: int = DEFAULT_ORACLE_BUDGET, oracle_max_delta: int | None = 3):
    """One :class:`MetricsSummary` per budget; the oracle is skipped above ``oracle_max_delta``."""
    deltas = list(deltas)
    if deltas != sorted(deltas):
        raise ValueError("deltas must be sorted ascending")
    rows, all_reports = [], {}
    for d in deltas:
        use_oracle = oracle_max_delta is None or d <= oracle_max_delta
        summary, reports = evaluate(net, examples, table, d, attack, use_oracle, oracle_budget)
        rows.append(summary)
        all_reports[d] = reports
    return rows, all_reports


def pass_budget_curve(reports, ibp_passes_per_example: int = 2):
    """Cumulative forward passes vs. fraction of examples verified by the oracle.

    Examples are taken in order of increasing pass count; examples sharing a
    pass count form one step.  Returns ``(points, ibp_total_passes)``.
    """
    n = len(reports)
    ordered = sorted(reports, key=lambda r: r.forward_passes)
    points = []
    total, verified = 0, 0
    for i, r in enumerate(ordered):
        total += r.forward_passes
        verified += r.oracle == ROBUST
        last = i + 1 == n or ordered[i + 1].forward_passes != r.forward_passes
        if last:
            points.append((total, verified / n))
    return points, ibp_passes_per_example * n
