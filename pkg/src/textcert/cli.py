"""Command-line entry point: ``textcert <subcommand> --config cfg.json [...]``."""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from . import config as config_mod
from .attack import hotflip
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .data import Dataset, char_vocab, encode, load_dataset, load_embeddings, tokenize
from .models import build_model
from .nn import forward
from .perturb import PerturbationSet, SubstitutionTable, count_space, elementary_perturbations
from .train import TrainConfig, train
from .verify import (ROBUST, evaluate, exhaustive_verify, ibp_verify, metrics_csv, sweep)

log = logging.getLogger("textcert")


class UsageError(ValueError):
    pass


class Context:
    """Data, vocabulary, table and model resolved from a config."""

    def __init__(self, cfg: dict, need_model: bool = True, fresh_model: bool = False):
        self.cfg = cfg
        self.level = cfg["level"]
        self.lookup = None
        meta = {}
        self.net = None
        if self.level == "word":
            if "embeddings" not in cfg:
                raise UsageError("word-level configs need 'embeddings'")
            emb = load_embeddings(cfg["embeddings"])
            self.vocab, self.lookup = emb.vocab, emb.matrix
        if need_model and not fresh_model:
            if "checkpoint" not in cfg:
                raise UsageError("config has no 'checkpoint'; train a model first")
            self.net, meta = load_checkpoint(cfg["checkpoint"], lookup=self.lookup)
        if self.level == "char":
            if "vocab" in meta:
                self.vocab = meta["vocab"]
            else:
                sets = [self.dataset(k) for k in ("train", "validation", "test") if k in cfg]
                extra = ""
                if "table" in cfg:
                    raw = SubstitutionTable.load(cfg["table"])
                    extra = "".join(raw) + "".join("".join(v) for v in raw.values())
                self.vocab = char_vocab(sets, extra=extra)
        self.table = {}
        if "table" in cfg:
            self.table = SubstitutionTable.load(cfg["table"]).to_ids(self.vocab)
        if fresh_model:
            sizes = dict(cfg["arch_sizes"])
            if self.level == "char":
                sizes.setdefault("vocab_size", len(self.vocab))
            sizes.setdefault("classes", cfg["class_count"])
            self.net = build_model(cfg["architecture"], seed=cfg["seed"], lookup=self.lookup, **sizes)

    def dataset(self, split) -> Dataset:
        return load_dataset(self.cfg[split], self.level, split, self.cfg["class_count"],
                            self.cfg["char_limit"])

    def examples(self, split):
        return encode(self.dataset(split), self.vocab, self.net.min_length() if self.net else 1)

    def example_from_text(self, text, label):
        toks = tokenize(text, self.level, limit=self.cfg["char_limit"] if self.level == "char" else None)
        return encode(Dataset([(label, toks)], self.level, "cli"), self.vocab, self.net.min_length())[0]


def _out_path(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _write_text(path, text):
    atomic_write(path, text.encode("utf-8"))


def _write_config(args, cfg):
    _write_text(_out_path(args, "config.resolved.json"), json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def cmd_train(args, cfg):
    ctx = Context(cfg, fresh_model=True)
    tcfg = TrainConfig(regime=cfg["regime"], delta=cfg["delta"], kappa_start=cfg["kappa"]["start"],
                       kappa_end=cfg["kappa"]["end"], warmup_fraction=cfg["kappa"]["warmup_fraction"],
                       mix=cfg["mix"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                       max_epochs=cfg["max_epochs"], patience=cfg["patience"], seed=cfg["seed"])
    buf = io.StringIO()
    net, records = train(tcfg, ctx.examples("train"), ctx.examples("validation"), ctx.net, ctx.table,
                         log_file=buf)
    ckpt = _out_path(args, "model.ckpt")
    meta = {"config": cfg, "seed": cfg["seed"]}
    if ctx.level == "char":
        meta["vocab"] = ctx.vocab
    save_checkpoint(ckpt, net, meta)
    _write_text(_out_path(args, "train_log.jsonl"), buf.getvalue())
    _write_config(args, {**cfg, "checkpoint": ckpt})
    print(f"trained {len(records)} epochs; checkpoint {ckpt}")
    return 0


def _test_examples(ctx, args):
    if args.text is not None:
        if args.label is None:
            raise UsageError("--text needs --label")
        return [ctx.example_from_text(args.text, args.label)]
    return ctx.examples("test")


def cmd_evaluate(args, cfg):
    ctx = Context(cfg)
    summary, reports = evaluate(ctx.net, _test_examples(ctx, args), ctx.table, cfg["delta"],
                                attack=cfg["attack"], oracle=cfg["delta"] <= cfg["oracle_max_delta"],
                                oracle_budget=cfg["oracle_budget"])
    _write_text(_out_path(args, "metrics.csv"), metrics_csv([summary]))
    _write_text(_out_path(args, "reports.jsonl"), "".join(r.to_json() + "\n" for r in reports))
    _write_config(args, cfg)
    sys.stdout.write(metrics_csv([summary]))
    return 0


def cmd_sweep(args, cfg):
    ctx = Context(cfg)
    deltas = cfg["deltas"]
    rows, reports = sweep(ctx.net, _test_examples(ctx, args), ctx.table, deltas, attack=cfg["attack"],
                          oracle_budget=cfg["oracle_budget"], oracle_max_delta=cfg["oracle_max_delta"])
    text = metrics_csv(rows)
    _write_text(_out_path(args, "metrics.csv"), text)
    _write_text(_out_path(args, "reports.jsonl"),
                "".join(json.dumps({"delta": d, **json.loads(r.to_json())}) + "\n"
                        for d in deltas for r in reports[d]))
    _write_config(args, cfg)
    sys.stdout.write(text)
    return 0


def cmd_attack(args, cfg):
    ctx = Context(cfg)
    lines = []
    for i, ex in enumerate(_test_examples(ctx, args)):
        pset = elementary_perturbations(ex.tokens, ctx.table, cfg["delta"], ex.perturbable)
        res = hotflip(ctx.net, pset, ex.label, cfg["delta"])
        lines.append(json.dumps({"index": i, "label": ex.label, "flips": res.flips, "changed": res.changed,
                                 "loss": res.loss, "clean_loss": res.clean_loss,
                                 "tokens": res.tokens.tolist()}) + "\n")
    _write_text(_out_path(args, "attacks.jsonl"), "".join(lines))
    _write_config(args, cfg)
    print(f"attacked {len(lines)} examples; {sum(json.loads(l)['changed'] for l in lines)} flipped")
    return 0


def cmd_verify(args, cfg):
    ctx = Context(cfg)
    lines = []
    for i, ex in enumerate(_test_examples(ctx, args)):
        pset = elementary_perturbations(ex.tokens, ctx.table, cfg["delta"], ex.perturbable)
        pred = int(np.argmax(forward(ctx.net, ex.tokens)))
        if args.method == "ibp":
            res = ibp_verify(ctx.net, pset, ex.label)
            verdict = "verified" if res.verified and pred == ex.label else "not-verified"
            rec = {"index": i, "verdict": verdict, "margin": res.margin, "bound_passes": res.bound_passes,
                   "vertex_evals": res.vertex_evals}
        else:
            res = exhaustive_verify(ctx.net, pset, ex.label, budget=cfg["oracle_budget"])
            verdict = "verified" if res.status == ROBUST else res.status
            rec = {"index": i, "verdict": verdict, "forward_passes": res.passes,
                   "counterexample": None if res.counterexample is None else res.counterexample.tolist()}
        lines.append(json.dumps(rec) + "\n")
        print(f"{i}\t{verdict}")
    _write_text(_out_path(args, f"verify_{args.method}.jsonl"), "".join(lines))
    _write_config(args, cfg)
    return 0


def cmd_count_space(args, cfg):
    delta = args.delta if args.delta is not None else (cfg or {}).get("delta", 3)
    if args.options is not None:
        counts = [int(c) for c in args.options.split(",") if c.strip()]
        pset = PerturbationSet(np.zeros(len(counts), dtype=np.int64),
                               tuple(tuple(range(1, c + 1)) for c in counts), delta)
    elif args.text is not None and args.table is not None:
        level = args.level or (cfg or {}).get("level", "char")
        toks = tokenize(args.text, level)
        table = SubstitutionTable.load(args.table)
        pset = PerturbationSet(np.zeros(len(toks), dtype=np.int64),
                               tuple(table.get(t, ()) for t in toks), delta)
    else:
        raise UsageError("count-space needs --options or --text with --table")
    print(count_space(pset))
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "attack": cmd_attack, "verify": cmd_verify,
            "sweep": cmd_sweep, "count-space": cmd_count_space}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textcert", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=name != "count-space")
        s.add_argument("--delta", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default=".")
        s.add_argument("--checkpoint")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("evaluate", "attack", "verify", "sweep"):
            s.add_argument("--text", help="verify a single sentence instead of the test split")
            s.add_argument("--label", type=int)
        if name == "verify":
            s.add_argument("--method", choices=["ibp", "exhaustive"], required=True)
        if name == "sweep":
            s.add_argument("--deltas", help="comma-separated ascending budgets")
        if name == "count-space":
            s.add_argument("--options", help="comma-separated replacement counts per position")
            s.add_argument("--text")
            s.add_argument("--table")
            s.add_argument("--level", choices=["word", "char"])
    return p


def main(argv=None) -> int:
    p = parser()
    try:
        args = p.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"delta": args.delta, "seed": args.seed, "checkpoint": args.checkpoint}
    if getattr(args, "deltas", None):
        overrides["deltas"] = [int(d) for d in args.deltas.split(",")]
    try:
        cfg = config_mod.load(args.config, **overrides) if args.config else None
        return COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, jsonschema.ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
