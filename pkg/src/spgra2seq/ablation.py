"""Paired-seed ablations: graph policy and the clustering constraint."""

from __future__ import annotations

import logging
import os

from . import graph
from .config import Config
from .evaluate import EvalReport, eval_ret, reports_csv, reports_markdown
from .train import train

log = logging.getLogger(__name__)

# variant name -> config overrides; "full" is the reference every variant is paired with
VARIANTS = {
    "full": {},
    "random": {"policy": "random"},
    "no-cluster": {"cluster": False},
}


def ablation_run(train_seqs, eval_seqs, cfg: Config, seeds=(0, 1, 2), variants=("full", "random", "no-cluster"),
                 masks=(0.0,), scale: float = 1.0, corpus_name: str = "", out_dir=None) -> list[EvalReport]:
    """Train every variant under every seed (everything else shared) and evaluate Ret."""
    reports = []
    for seed in seeds:
        for name in variants:
            run_cfg = cfg.replace(seed=seed, **VARIANTS[name])
            before = dict(graph.POLICY_CALLS)
            result = train(train_seqs, run_cfg, scale=scale, log_every=0)
            calls = {k: graph.POLICY_CALLS[k] - before.get(k, 0) for k in graph.POLICIES}
            log.info("ablation %s seed %d: adjacency builds %s", name, seed, calls)
            for mask in masks:
                ret = eval_ret(result.model, eval_seqs, mask, seed)
                reports.append(EvalReport(ret, None, mask, corpus_name, seed, len(eval_seqs), label=name).check())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
            f.write(reports_csv(reports))
        with open(os.path.join(out_dir, "ablation.md"), "w") as f:
            f.write(reports_markdown(reports))
            f.write("\n" + paired_summary(reports))
    return reports


def paired_wins(reports, variant: str, reference: str = "full", mask: float = 0.0, k: int = 1):
    """(reference wins, ties, variant wins) over seeds on ret@k."""
    ref = {r.seed: r.ret[k] for r in reports if r.label == reference and r.mask == mask}
    alt = {r.seed: r.ret[k] for r in reports if r.label == variant and r.mask == mask}
    seeds = sorted(set(ref) & set(alt))
    wins = sum(ref[s] > alt[s] for s in seeds)
    ties = sum(ref[s] == alt[s] for s in seeds)
    return wins, ties, len(seeds) - wins - ties


def paired_summary(reports, reference: str = "full") -> str:
    labels = sorted({r.label for r in reports} - {reference})
    masks = sorted({r.mask for r in reports})
    lines = ["| variant | mask | full wins | ties | variant wins |", "|---|---|---|---|---|"]
    for lab in labels:
        for m in masks:
            w, t, l = paired_wins(reports, lab, reference, m)
            lines.append(f"| {lab} | {m} | {w} | {t} | {l} |")
    return "\n".join(lines) + "\n"
