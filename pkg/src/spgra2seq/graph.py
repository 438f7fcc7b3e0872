"""Patch graphs: synonymous-proximity adjacency and comparison policies.

Node 0 is the whole-sketch view; nodes 1..M are patches.  Every policy
produces the augmented matrix::

    [[0.5, 0 ... 0],
     [0.5,   A    ],
     [ : ,        ],
     [0.5,        ]]

where the inner block ``A`` carries self-loops of 1 and the policy's links.
Selections are computed in float64 numpy; the model rebuilds the same
entries on the autodiff tape from the selection masks returned here.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

TOP1_WEIGHT = 0.5
TOP2_WEIGHT = 0.2
GLOBAL_WEIGHT = 0.5
POLICIES = ("synonymous", "random", "spatial", "temporal")

# per-policy construction counts; the ablation harness reads these
POLICY_CALLS: Counter = Counter()


@dataclass
class Adjacency:
    a: np.ndarray
    policy: str
    first: np.ndarray = None   # top-1 neighbour per inner node (-1: none), 0-based inner index
    second: np.ndarray = None

    def edges(self):
        """(i, j, weight) for every nonzero off-diagonal entry, node indices incl. the global node."""
        n = self.a.shape[0]
        return [(i, j, float(self.a[i, j])) for i in range(n) for j in range(n)
                if i != j and self.a[i, j] != 0]


def cosine(u, v) -> float:
    """Cosine similarity; defined as 0 when either vector is zero."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        log.debug("cosine with zero vector; returning 0")
        return 0.0
    return float(u @ v / (nu * nv))


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise cosine over the last axis; zero rows give zero similarity."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    unit = np.divide(x, n, out=np.zeros_like(x), where=n > 0)
    return unit @ np.swapaxes(unit, -1, -2)


def select_top2(scores: np.ndarray, masked=None) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 and top-2 column per row excluding the diagonal and masked nodes.

    ``scores`` is [..., M, M].  Ties go to the lowest index.  Rows of masked
    nodes, and rows without enough candidates, get -1.
    """
    s = np.array(scores, dtype=np.float64)
    m = s.shape[-1]
    if masked is None:
        masked = np.zeros(s.shape[:-1], dtype=bool)
    masked = np.asarray(masked, dtype=bool)
    eye = np.eye(m, dtype=bool)
    banned = eye | masked[..., None, :]
    s[np.broadcast_to(banned, s.shape)] = -np.inf
    first = s.argmax(axis=-1)
    ok1 = np.isfinite(np.take_along_axis(s, first[..., None], -1)[..., 0])
    np.put_along_axis(s, first[..., None], -np.inf, axis=-1)
    second = s.argmax(axis=-1)
    ok2 = np.isfinite(np.take_along_axis(s, second[..., None], -1)[..., 0])
    first = np.where(ok1 & ~masked, first, -1)
    second = np.where(ok2 & ~masked, second, -1)
    return first, second


def selection_masks(first: np.ndarray, second: np.ndarray, m: int):
    """One-hot [..., M, M] matrices marking the top-1 and top-2 links."""
    shape = first.shape + (m,)
    s1 = np.zeros(shape)
    s2 = np.zeros(shape)
    for sel, out in ((first, s1), (second, s2)):
        ok = sel >= 0
        idx = np.where(ok, sel, 0)
        np.put_along_axis(out, idx[..., None], ok[..., None].astype(float), axis=-1)
    return s1, s2


def augment(inner: np.ndarray) -> np.ndarray:
    """Wrap an inner [..., M, M] block with the global-node border."""
    m = inner.shape[-1]
    out = np.zeros(inner.shape[:-2] + (m + 1, m + 1))
    out[..., 0, 0] = GLOBAL_WEIGHT
    out[..., 1:, 0] = GLOBAL_WEIGHT
    out[..., 1:, 1:] = inner
    return out


def weights_from_selection(scores: np.ndarray, first, second) -> np.ndarray:
    """Inner block: identity + 0.5 max(s, 0) on top-1 + 0.2 max(s, 0) on top-2."""
    m = scores.shape[-1]
    s1, s2 = selection_masks(first, second, m)
    pos = np.maximum(scores, 0.0)
    return np.eye(m) + pos * (TOP1_WEIGHT * s1 + TOP2_WEIGHT * s2)


def build_adjacency(emb: np.ndarray, masked=None) -> Adjacency:
    """Synonymous-proximity adjacency from an (M+1) x d embedding batch (row 0 global)."""
    POLICY_CALLS["synonymous"] += 1
    inner = np.asarray(emb, dtype=np.float64)[1:]
    m = len(inner)
    masked = np.zeros(m, dtype=bool) if masked is None else np.asarray(masked, dtype=bool)
    cos = cosine_matrix(inner)
    first, second = select_top2(cos, masked)
    return Adjacency(augment(weights_from_selection(cos, first, second)), "synonymous", first, second)


def normalize(adj) -> np.ndarray:
    """D^-1/2 A D^-1/2 with D the diagonal of row sums."""
    a = adj.a if isinstance(adj, Adjacency) else np.asarray(adj, dtype=np.float64)
    d = a.sum(axis=-1)
    inv = 1.0 / np.sqrt(d)
    return inv[..., :, None] * a * inv[..., None, :]


def _cut(inner: np.ndarray, masked) -> np.ndarray:
    if masked is None:
        return inner
    masked = np.asarray(masked, dtype=bool)
    keep = ~masked
    out = inner * keep[:, None] * keep[None, :]
    np.fill_diagonal(out, 1.0)
    return out


def random_adjacency(M: int, seed=None, masked=None, rng=None) -> Adjacency:
    """Inner block i.i.d. U(0, 1) with unit diagonal (random-linking ablation)."""
    POLICY_CALLS["random"] += 1
    rng = np.random.default_rng(seed) if rng is None else rng
    inner = rng.uniform(0.0, 1.0, size=(M, M))
    np.fill_diagonal(inner, 1.0)
    return Adjacency(augment(_cut(inner, masked)), "random")


def spatial_adjacency(centers: np.ndarray, masked=None, patch_size: int = 48) -> Adjacency:
    """Top-2 nearest centers on the canvas, weighted by 1 / (1 + dist / patch_size)."""
    POLICY_CALLS["spatial"] += 1
    c = np.asarray(centers, dtype=np.float64)
    dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    sim = 1.0 / (1.0 + dist / patch_size)
    m = len(c)
    masked = np.zeros(m, dtype=bool) if masked is None else np.asarray(masked, dtype=bool)
    first, second = select_top2(sim, masked)
    return Adjacency(augment(weights_from_selection(sim, first, second)), "spatial", first, second)


def temporal_adjacency(M: int, masked=None) -> Adjacency:
    """Drawing-order chain: 0.5 to the next patch, 0.2 to the previous one."""
    POLICY_CALLS["temporal"] += 1
    inner = np.eye(M)
    for i in range(M):
        if i + 1 < M:
            inner[i, i + 1] = TOP1_WEIGHT
        if i > 0:
            inner[i, i - 1] = TOP2_WEIGHT
    return Adjacency(augment(_cut(inner, masked)), "temporal")


def graph_dump(adj: Adjacency, centers) -> dict:
    """JSON-ready description consumed by the SVG renderer."""
    return {
        "policy": adj.policy,
        "centers": [[int(x), int(y)] for x, y in np.asarray(centers)],
        "edges": [[i, j, w] for i, j, w in adj.edges()],
        "top1": [] if adj.first is None else [int(j) for j in adj.first],
    }
