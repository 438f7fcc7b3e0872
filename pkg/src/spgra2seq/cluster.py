"""Online hard-assignment clustering of patch embeddings with EMA centroids."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class ClusterError(RuntimeError):
    pass


@dataclass
class ClusterState:
    centroids: np.ndarray  # [K, d]
    eta: float = 0.05
    tau: int = 0
    padded: bool = False   # init had to perturb duplicates to reach K

    @property
    def K(self) -> int:
        return len(self.centroids)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"cluster/centroid/{k}": c for k, c in enumerate(self.centroids)}
        out["cluster/tau"] = np.array([self.tau], dtype=np.float32)
        out["cluster/eta"] = np.array([self.eta], dtype=np.float32)
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "ClusterState | None":
        keys = sorted((k for k in state if k.startswith("cluster/centroid/")),
                      key=lambda k: int(k.rsplit("/", 1)[1]))
        if not keys:
            return None
        cents = np.stack([state[k] for k in keys]).astype(np.float32)
        # eta is stored as float32; its shortest repr recovers the configured decimal
        return cls(cents, float(str(state["cluster/eta"][0])), int(state["cluster/tau"][0]))


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _flat(batch) -> np.ndarray:
    b = np.asarray(batch, dtype=np.float64)
    return b.reshape(-1, b.shape[-1])


def assign_labels(batch, state: ClusterState) -> np.ndarray:
    """Cluster index per embedding: argmax cosine to the current centroids, ties to lowest k.

    Zero embeddings get cluster 0.
    """
    if state is None or state.centroids is None or len(state.centroids) == 0:
        raise ClusterError("cluster state is not initialised")
    v = _flat(batch)
    cents = np.asarray(state.centroids, dtype=np.float64)
    cos = _unit(v) @ _unit(cents).T
    zero_c = np.linalg.norm(cents, axis=1) == 0
    if zero_c.any() and not zero_c.all():
        cos[:, zero_c] = -np.inf
    labels = cos.argmax(axis=1)
    labels[np.linalg.norm(v, axis=1) == 0] = 0
    return labels


def assign(batch, state: ClusterState) -> np.ndarray:
    """One-hot assignment matrix q [n, K] for the flattened batch."""
    labels = assign_labels(batch, state)
    q = np.zeros((len(labels), state.K))
    q[np.arange(len(labels)), labels] = 1
    return q


def update(batch, q: np.ndarray, state: ClusterState, exclude=None) -> ClusterState:
    """EMA step ``c_k <- eta * mean(members) + (1 - eta) * c_k``.

    Empty clusters keep their centroid unchanged.  Zero embeddings and rows
    flagged in ``exclude`` never contribute.
    """
    v = _flat(batch)
    q = np.asarray(q, dtype=np.float64).copy()
    drop = np.linalg.norm(v, axis=1) == 0
    if exclude is not None:
        drop |= np.asarray(exclude, dtype=bool).reshape(-1)
    q[drop] = 0
    counts = q.sum(axis=0)
    sums = q.T @ v
    new = state.centroids.copy()
    hit = counts > 0
    mean = sums[hit] / counts[hit, None]
    new[hit] = (state.eta * mean + (1 - state.eta) * state.centroids[hit].astype(np.float64)).astype(new.dtype)
    return ClusterState(new, state.eta, state.tau + 1, state.padded)


def init_centroids(batch, K: int, seed=0, eta: float = 0.05) -> ClusterState:
    """k-means++ seeding with cosine distance ``1 - cos`` over the nonzero embeddings."""
    rng = np.random.default_rng(seed)
    v = _flat(batch)
    v = v[np.linalg.norm(v, axis=1) > 0]
    if len(v) == 0:
        raise ClusterError("cannot seed centroids from an all-zero batch")
    u = _unit(v)
    chosen = [int(rng.integers(len(v)))]
    dist = 1.0 - u @ u[chosen[0]]
    padded = False
    while len(chosen) < K:
        w = np.clip(dist, 0, None) ** 2
        w[np.isclose(dist, 0, atol=1e-12)] = 0
        if w.sum() <= 0:
            padded = True
            break
        nxt = int(rng.choice(len(v), p=w / w.sum()))
        chosen.append(nxt)
        dist = np.minimum(dist, 1.0 - u @ u[nxt])
    cents = v[chosen]
    if padded:
        log.warning("only %d distinct embeddings for K=%d; padding with perturbed copies", len(chosen), K)
        extra = []
        scale = np.linalg.norm(cents, axis=1).mean() * 1e-2
        for i in range(K - len(chosen)):
            base = cents[i % len(cents)]
            extra.append(base + rng.normal(0.0, scale, size=base.shape))
        cents = np.concatenate([cents, np.array(extra)])
    return ClusterState(cents.astype(np.float32), eta, 0, padded)
