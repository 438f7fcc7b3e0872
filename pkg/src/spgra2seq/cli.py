"""``spgra2seq`` command line: prep, synth-corpus, train, eval, ablate, graph-dump, heal-demo.

Exit codes: 0 success, 1 user error, 2 internal error.  Errors are reported
as a single stderr line ``E_<CODE>: message``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as config_mod

log = logging.getLogger("spgra2seq")

ENV_DATA_DIR = "SPG_DATA_DIR"


class UserError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)

    def error(self, message):
        raise UserError("E_USAGE", message)


# ---------------------------------------------------------------- helpers

def resolve_corpus(path: str | None) -> str:
    root = os.environ.get(ENV_DATA_DIR)
    if not path:
        if not root:
            raise UserError("E_CORPUS", f"no --corpus given and {ENV_DATA_DIR} is unset")
        path = root
    elif not os.path.isdir(path) and root and os.path.isdir(os.path.join(root, path)):
        path = os.path.join(root, path)
    if not os.path.isdir(path):
        raise UserError("E_CORPUS", f"corpus directory {path!r} not found")
    return path


def _config(args, base=None, **overrides):
    try:
        return config_mod.load(args.config, base, **overrides)
    except FileNotFoundError:
        raise UserError("E_CONFIG", f"config file {args.config!r} not found") from None


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _load_model(path, args, **overrides):
    from .train import load_model
    if not path or not os.path.exists(path):
        raise UserError("E_CHECKPOINT", f"checkpoint {path!r} not found")
    side = os.path.splitext(path)[0] + ".cfg"
    base = config_mod.load(side) if os.path.exists(side) else None
    return load_model(path, _config(args, base, **overrides))[0]


def _split_ids(corpus, split: str, limit: int | None):
    ids = corpus.split(split)
    if not ids:
        raise UserError("E_CORPUS", f"split {split!r} is empty")
    return ids[:limit] if limit else ids


# ---------------------------------------------------------------- commands

def cmd_prep(args):
    from . import corpus
    if not os.path.exists(args.input):
        raise UserError("E_INPUT", f"input file {args.input!r} not found")
    cfg = _config(args, max_len=args.max_len)
    _emit(corpus.prep(args.input, args.out, cfg.max_len, args.seed))


def cmd_synth_corpus(args):
    from . import corpus
    cfg = _config(args, max_len=args.max_len)
    c = corpus.synthetic(args.train, args.test, args.valid, args.seed, cfg.max_len,
                         name=os.path.basename(os.path.normpath(args.out)))
    corpus.write(c, args.out)
    _emit({"out": args.out, "count": len(c.seqs), **{k: len(v) for k, v in c.splits.items()}})


def cmd_train(args):
    from . import corpus
    from .train import train
    cdir = resolve_corpus(args.corpus)
    c = corpus.read(cdir)
    cfg = _config(args, seed=args.seed, max_steps=args.max_steps, epochs=args.epochs, batch=args.batch,
                  mask=args.mask, lam=args.lam, policy=args.policy, lr=args.lr, decay=args.decay,
                  hidden=args.hidden, cluster=False if args.no_cluster else None, max_len=c.max_len)
    seqs, _ = c.subset(_split_ids(c, args.split, args.limit))
    result = train(seqs, cfg, args.out, resume=args.resume, scale=c.scale)
    last = result.curve[-1] if result.curve else {}
    _emit({"out": args.out, "steps": result.steps, "final_loss": last.get("loss")})


def cmd_eval(args):
    from . import corpus
    from .classifier import SketchClassifier, train_classifier
    from .evaluate import evaluate, report_dict, reports_csv, reports_markdown
    c = corpus.read(resolve_corpus(args.corpus))
    model = _load_model(args.ckpt, args)
    ids = _split_ids(c, args.split, args.limit)
    clf = None
    if args.classifier:
        if os.path.exists(args.classifier):
            clf = SketchClassifier.load(args.classifier)
        else:
            tr = c.split("train")
            clf = train_classifier(c.subset(tr)[0], c.labels(tr), c.categories, seed=args.seed)
            clf.save(args.classifier)
    reports = [evaluate(model, c, ids, m, args.seed, clf, label=os.path.basename(args.ckpt)) for m in args.mask]
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out + ".csv", "w") as f:
            f.write(reports_csv(reports))
        with open(args.out + ".md", "w") as f:
            f.write(reports_markdown(reports))
    for r in reports:
        _emit(report_dict(r))


def cmd_ablate(args):
    from . import corpus
    from .ablation import ablation_run, paired_summary
    c = corpus.read(resolve_corpus(args.corpus))
    cfg = _config(args, seed=args.seed, max_steps=args.max_steps, max_len=c.max_len, hidden=args.hidden,
                  batch=args.batch, decay=args.decay)
    train_seqs, _ = c.subset(_split_ids(c, "train", args.limit))
    eval_seqs, _ = c.subset(_split_ids(c, args.eval_split, args.limit))
    reports = ablation_run(train_seqs, eval_seqs, cfg, args.seeds, args.variants, args.mask, c.scale, c.name,
                           args.out)
    print(paired_summary(reports), end="")


def cmd_graph_dump(args):
    from . import corpus
    from .figures import graph_dump
    c = corpus.read(resolve_corpus(args.corpus))
    if not 0 <= args.sketch_id < len(c.seqs):
        raise UserError("E_SKETCH_ID", f"sketch id {args.sketch_id} not in corpus (0..{len(c.seqs) - 1})")
    model = _load_model(args.ckpt, args)
    info = graph_dump(model, c.seqs[args.sketch_id], args.out, args.policy, args.seed)
    _emit({"out": args.out, "policy": info["policy"], "nodes": len(info["centers"]),
           "top1": info["top1"]})


def cmd_heal_demo(args):
    from . import corpus
    from .figures import heal_demo
    model = _load_model(args.ckpt, args)
    if args.n <= 0:
        _emit({"out": args.out, "files": 0})
        return
    c = corpus.read(resolve_corpus(args.corpus))
    ids = _split_ids(c, args.split, args.n)
    paths = heal_demo(model, c.subset(ids)[0], args.mask, args.out, args.seed)
    _emit({"out": args.out, "files": len(paths)})


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spgra2seq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="key=value config file (flags override it)")
        sp.add_argument("--log-level", default="WARNING")
        sp.set_defaults(func=fn)
        return sp

    sp = add("prep", cmd_prep, "normalize a QuickDraw/stroke-5 NDJSON file into a corpus directory")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-len", type=int, default=None)

    sp = add("synth-corpus", cmd_synth_corpus, "write the procedural four-category corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train", type=int, default=512, help="training sketches per category")
    sp.add_argument("--test", type=int, default=128, help="test sketches per category")
    sp.add_argument("--valid", type=int, default=0)
    sp.add_argument("--max-len", type=int, default=64)

    sp = add("train", cmd_train, "train a model; writes model.spg2, config.txt and loss.csv")
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--limit", type=int, default=None, help="use only the first N sketches of the split")
    sp.add_argument("--resume", default=None)
    for flag, typ in (("--max-steps", int), ("--epochs", int), ("--batch", int), ("--mask", float),
                      ("--lr", float), ("--decay", float), ("--hidden", int)):
        sp.add_argument(flag, type=typ, default=None)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--policy", choices=("synonymous", "random", "spatial", "temporal"), default=None)
    sp.add_argument("--no-cluster", action="store_true")

    sp = add("eval", cmd_eval, "Ret@k (and optionally Rec) on a corpus split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--split", default="test")
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--mask", type=float, nargs="+", default=[0.0])
    sp.add_argument("--classifier", default=None, help="classifier checkpoint; trained and saved if missing")
    sp.add_argument("--out", default=None, help="report path prefix (.csv and .md are written)")

    sp = add("ablate", cmd_ablate, "paired-seed policy / clustering ablation")
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--variants", nargs="+", default=["full", "random", "no-cluster"],
                    choices=("full", "random", "no-cluster"))
    sp.add_argument("--mask", type=float, nargs="+", default=[0.0])
    sp.add_argument("--eval-split", default="train")
    sp.add_argument("--limit", type=int, default=None)
    for flag, typ in (("--max-steps", int), ("--batch", int), ("--hidden", int), ("--decay", float)):
        sp.add_argument(flag, type=typ, default=None)

    sp = add("graph-dump", cmd_graph_dump, "SVG of one sketch's patch graph (red centers, blue top-1 edges)")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--sketch-id", type=int, required=True)
    sp.add_argument("--policy", choices=("synonymous", "random", "spatial", "temporal"), default=None)
    sp.add_argument("--out", required=True)

    sp = add("heal-demo", cmd_heal_demo, "original / masked / healed PNG triplets")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--split", default="test")
    sp.add_argument("--mask", type=float, default=0.3)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .classifier import ClassifierError
    from .corpus import CorpusError
    from .evaluate import EvalError
    from .sketch import SketchFormatError
    from .train import TrainingError

    user_errors = {
        config_mod.ConfigError: "E_CONFIG", CorpusError: "E_CORPUS", CheckpointError: "E_CHECKPOINT",
        ClassifierError: "E_CLASSIFIER", EvalError: "E_EVAL", TrainingError: "E_TRAIN",
        SketchFormatError: "E_FORMAT",
    }
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return 0
    except UserError as e:
        print(f"{e.code}: {_one_line(e)}", file=sys.stderr)
        return 1
    except tuple(user_errors) as e:
        code = next(c for t, c in user_errors.items() if isinstance(e, t))
        print(f"{code}: {_one_line(e)}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"E_IO: {_one_line(e)}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - top-level guard
        log.debug("internal error", exc_info=True)
        print(f"E_INTERNAL: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 2


def _one_line(e: Exception) -> str:
    return " ".join(str(e).split()) or type(e).__name__


if __name__ == "__main__":
    sys.exit(main())
