"""On-disk corpus: normalized stroke-5 NDJSON plus split manifests.

Layout of a corpus directory::

    meta.json         scale, max_len, categories, split sizes
    sketches.ndjson   one {"id", "word", "scale", "origin", "stroke5"} per line
    train.txt / valid.txt / test.txt   sketch ids, one per line
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .sketch import SketchFormatError, StrokeSeq, normalize, offset_std, parse_ndjson

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    seqs: list
    words: list
    splits: dict = field(default_factory=dict)
    scale: float = 1.0
    max_len: int = 250
    name: str = "corpus"

    @property
    def categories(self) -> list[str]:
        return sorted(set(self.words))

    def labels(self, ids=None) -> np.ndarray:
        cats = self.categories
        ids = range(len(self.seqs)) if ids is None else ids
        return np.array([cats.index(self.words[i]) for i in ids])

    def split(self, name: str) -> list[int]:
        return list(self.splits.get(name, []))

    def subset(self, ids) -> tuple[list, list]:
        return [self.seqs[i] for i in ids], [self.words[i] for i in ids]


def build(raw: list[StrokeSeq], words: list[str], max_len: int, seed: int = 0,
          fractions=(0.8, 0.1, 0.1), splits: dict | None = None, name: str = "corpus") -> Corpus:
    """Split with a seeded shuffle, then normalize everything by the train-split offset std."""
    if not raw:
        raise CorpusError("no sketches")
    if splits is None:
        order = np.random.default_rng(seed).permutation(len(raw))
        n_train = int(round(fractions[0] * len(raw)))
        n_valid = int(round(fractions[1] * len(raw)))
        splits = {"train": sorted(order[:n_train].tolist()),
                  "valid": sorted(order[n_train:n_train + n_valid].tolist()),
                  "test": sorted(order[n_train + n_valid:].tolist())}
    train = splits["train"] or list(range(len(raw)))
    scale = offset_std([raw[i] for i in train])
    seqs = [normalize(s, scale) for s in raw]
    return Corpus(seqs, list(words), splits, scale, max_len, name)


def parse_lines(lines, max_len: int = 250):
    """Parse NDJSON lines; returns (seqs, words, skipped) with unparseable lines skipped."""
    seqs, words, skipped = [], [], 0
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            seq = parse_ndjson(line, 1.0, max_len)
            rec = json.loads(line)
        except SketchFormatError as e:
            log.warning("line %d skipped: %s", n, e)
            skipped += 1
            continue
        if seq.truncated:
            log.warning("line %d truncated to %d actions", n, max_len)
        seqs.append(seq)
        words.append(rec.get("word", "unknown") if isinstance(rec, dict) else "unknown")
    return seqs, words, skipped


def write(corpus: Corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sketches.ndjson"), "w") as f:
        for i, (seq, word) in enumerate(zip(corpus.seqs, corpus.words)):
            rec = {"id": i, "word": word, "scale": round(float(seq.scale), 6),
                   "origin": [float(v) for v in seq.origin],
                   "stroke5": [[float(round(float(v), 6)) for v in row] for row in seq.actions]}
            f.write(json.dumps(rec) + "\n")
    for name in SPLITS:
        with open(os.path.join(out_dir, f"{name}.txt"), "w") as f:
            f.writelines(f"{i}\n" for i in corpus.splits.get(name, []))
    meta = {"name": corpus.name, "scale": round(float(corpus.scale), 6), "max_len": corpus.max_len,
            "categories": corpus.categories, "count": len(corpus.seqs),
            "splits": {k: len(v) for k, v in corpus.splits.items()}}
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def read(corpus_dir) -> Corpus:
    if not os.path.isdir(corpus_dir):
        raise CorpusError(f"corpus directory {corpus_dir!r} not found")
    for name in ("meta.json", "sketches.ndjson"):
        if not os.path.exists(os.path.join(corpus_dir, name)):
            raise CorpusError(f"{corpus_dir!r} is not a corpus directory (missing {name})")
    with open(os.path.join(corpus_dir, "meta.json")) as f:
        meta = json.load(f)
    seqs, words = [], []
    with open(os.path.join(corpus_dir, "sketches.ndjson")) as f:
        for line in f:
            rec = json.loads(line)
            seqs.append(StrokeSeq(np.array(rec["stroke5"], dtype=np.float32), rec["scale"],
                                  tuple(rec.get("origin", (0.0, 0.0)))))
            words.append(rec["word"])
    splits = {}
    for name in SPLITS:
        path = os.path.join(corpus_dir, f"{name}.txt")
        if os.path.exists(path):
            with open(path) as f:
                splits[name] = [int(x) for x in f.read().split()]
    return Corpus(seqs, words, splits, meta["scale"], meta["max_len"], meta.get("name", "corpus"))


def prep(in_path, out_dir, max_len: int = 250, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> dict:
    with open(in_path) as f:
        seqs, words, skipped = parse_lines(f, max_len)
    if not seqs:
        raise CorpusError("no sketches")
    corpus = build(seqs, words, max_len, seed, fractions, name=os.path.basename(os.path.normpath(out_dir)))
    write(corpus, out_dir)
    return {"parsed": len(seqs), "skipped": skipped, **{k: len(v) for k, v in corpus.splits.items()}}


def synthetic(n_train: int, n_test: int, n_valid: int = 0, seed: int = 0, max_len: int = 64,
              categories=None, name: str = "synthetic") -> Corpus:
    """Procedural corpus with exact per-category split sizes."""
    from . import synth
    cats = categories or synth.CATEGORIES
    per = n_train + n_valid + n_test
    recs = synth.generate(per, seed, cats)
    seqs, words, _ = parse_lines([json.dumps(r) for r in recs], max_len)
    nc = len(cats)
    idx = np.arange(len(seqs))
    rank = idx // nc   # records interleave categories
    splits = {"train": idx[rank < n_train].tolist(),
              "valid": idx[(rank >= n_train) & (rank < n_train + n_valid)].tolist(),
              "test": idx[rank >= n_train + n_valid].tolist()}
    return build(seqs, words, max_len, seed, splits=splits, name=name)
