"""Retrieval (Ret@k) and recognition (Rec) evaluation of a trained model.

Ret: encode each test sketch (optionally masked) deterministically, decode it
greedily, push the generated sketch back through raster -> crop -> encode and
rank the gallery of clean codes by Euclidean distance.  Rec: fraction of
generated sketches a separately trained classifier puts in the source
category.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import SPGra2Seq
from .sketch import make_patchset

log = logging.getLogger(__name__)

KS = (1, 5, 10)
MIN_CLASSIFIER_ACCURACY = 90.0


class EvalError(RuntimeError):
    pass


@dataclass
class EvalReport:
    ret: dict = field(default_factory=dict)   # k -> percentage
    rec: float | None = None
    mask: float = 0.0
    corpus: str = ""
    seed: int = 0
    n: int = 0
    metric: str = "euclidean"
    label: str = ""

    def check(self) -> "EvalReport":
        vals = [self.ret[k] for k in sorted(self.ret)]
        if any(not 0 <= v <= 100 for v in vals) or (self.rec is not None and not 0 <= self.rec <= 100):
            raise EvalError("report values must be percentages")
        if any(a > b for a, b in zip(vals, vals[1:])):
            raise EvalError("ret@k must be nondecreasing in k")
        return self

    def row(self) -> dict:
        out = {"label": self.label, "corpus": self.corpus, "mask": self.mask, "seed": self.seed,
               "n": self.n, "metric": self.metric, "rec": "" if self.rec is None else round(self.rec, 4)}
        out.update({f"ret@{k}": round(v, 4) for k, v in sorted(self.ret.items())})
        return out


def patchsets(model: SPGra2Seq, seqs, mask: float = 0.0, seed: int = 0, workers: int = 4):
    """Patch sets for evaluation; sketch i is masked with seed (seed, i)."""
    cfg = model.cfg

    def one(item):
        i, s = item
        return make_patchset(s, cfg.canvas, cfg.patch, cfg.M, mask, [seed, i])[0]

    items = list(enumerate(seqs))
    if workers > 1 and len(items) > 8:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, items))
    return [one(it) for it in items]


def encode_codes(model: SPGra2Seq, seqs, mask: float = 0.0, seed: int = 0, batch: int = 64) -> np.ndarray:
    """Deterministic codes (epsilon = 0, batchnorm in inference mode) [n, z]."""
    psets = patchsets(model, seqs, mask, seed)
    out = []
    from .tensor import no_grad
    with no_grad():
        for i in range(0, len(psets), batch):
            code, _, _ = model.encode(psets[i:i + batch], train=False, sample=False)
            out.append(code.mu.data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, model.cfg.z))


def retrieval_ranks(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """0-based rank of gallery[i] among all gallery items for query i (Euclidean).

    Equal distances are broken toward the lower gallery index.
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    d = ((q[:, None, :] - g[None, :, :]) ** 2).sum(-1)
    n = len(q)
    true = d[np.arange(n), np.arange(n)][:, None]
    idx = np.arange(len(g))[None, :]
    closer = (d < true) | ((d == true) & (idx < np.arange(n)[:, None]))
    return closer.sum(axis=1)


def ret_at(ranks: np.ndarray, ks=KS) -> dict:
    ranks = np.asarray(ranks)
    return {k: 100.0 * float((ranks < k).mean()) if len(ranks) else 0.0 for k in ks}


def greedy_generator(model: SPGra2Seq, batch: int = 64):
    def gen(codes):
        out = []
        for i in range(0, len(codes), batch):
            out.extend(model.generate(codes[i:i + batch], greedy=True))
        return out
    return gen


def eval_ret(model: SPGra2Seq, seqs, mask: float = 0.0, seed: int = 0, ks=KS, generator=None,
             return_generated: bool = False):
    """Ret@k percentages for ``seqs`` against the gallery of their clean codes.

    ``generator`` maps query codes to sketches; the default is greedy decoding.
    Passing ``lambda y: seqs`` gives the identity re-encode sanity path.
    """
    seqs = list(seqs)
    gallery = encode_codes(model, seqs, 0.0, seed)
    queries = gallery if mask == 0 else encode_codes(model, seqs, mask, seed)
    gen = (generator or greedy_generator(model))(queries)
    recoded = encode_codes(model, gen, 0.0, seed)
    ret = ret_at(retrieval_ranks(recoded, gallery), ks)
    return (ret, gen) if return_generated else ret


def eval_rec(classifier, generated, labels) -> float:
    """Percentage of generated sketches classified into their source category."""
    if classifier.heldout_accuracy is None or classifier.heldout_accuracy < MIN_CLASSIFIER_ACCURACY:
        raise EvalError(f"classifier held-out accuracy {classifier.heldout_accuracy} below "
                        f"{MIN_CLASSIFIER_ACCURACY}%; refusing to report Rec")
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return 100.0 * float((classifier.predict(generated) == labels).mean())


def evaluate(model: SPGra2Seq, corpus, ids=None, mask: float = 0.0, seed: int = 0, classifier=None,
             label: str = "") -> EvalReport:
    ids = corpus.split("test") if ids is None else list(ids)
    seqs, words = corpus.subset(ids)
    ret, gen = eval_ret(model, seqs, mask, seed, return_generated=True)
    rec = None
    if classifier is not None:
        cats = classifier.categories
        rec = eval_rec(classifier, gen, [cats.index(w) for w in words])
    return EvalReport(ret, rec, mask, corpus.name, seed, len(seqs), label=label).check()


def reports_csv(reports) -> str:
    rows = [r.row() for r in reports]
    if not rows:
        return ""
    fields = list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def reports_markdown(reports) -> str:
    rows = [r.row() for r in reports]
    if not rows:
        return ""
    fields = list(rows[0])
    lines = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    lines += ["| " + " | ".join(str(r[f]) for f in fields) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def report_dict(report: EvalReport) -> dict:
    d = asdict(report)
    d["ret"] = {str(k): v for k, v in report.ret.items()}
    return d
