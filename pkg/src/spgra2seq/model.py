"""SP-gra2seq network: CNN patch encoder, GCN sketch encoder, mixture-density LSTM decoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import graph
from . import tensor as T
from .cluster import ClusterState, assign_labels
from .config import Config
from .optim import ParamStore
from .sketch import PatchSet, StrokeSeq
from .tensor import Tensor

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
RHO_FLOOR = 1e-6
START_TOKEN = np.array([0, 0, 1, 0, 0], dtype=np.float32)


def conv_plan(patch: int, ladder) -> list[int]:
    """Channels of the conv stages that fit a ``patch``-pixel input.

    Each stage is a 2x2 valid conv followed by a 2x2 pool whenever the map
    is still at least 2 wide; stages stop once the map is 1x1.
    """
    size, used = patch, []
    for ch in ladder:
        if size < 2:
            break
        size -= 1
        if size >= 2:
            size //= 2
        used.append(ch)
    return used


def init_conv_tower(store: ParamStore, prefix: str, stages, rng, cin: int = 1) -> int:
    for i, ch in enumerate(stages):
        store.add(f"{prefix}/conv{i}/w", rng.normal(0, math.sqrt(2.0 / (cin * 4)), (ch, cin, 2, 2)))
        store.add(f"{prefix}/conv{i}/b", np.zeros(ch))
        store.add(f"{prefix}/bn{i}/gamma", np.ones(ch))
        store.add(f"{prefix}/bn{i}/beta", np.zeros(ch))
        store.add_buffer(f"{prefix}/bn{i}/running_mean", np.zeros(ch))
        store.add_buffer(f"{prefix}/bn{i}/running_var", np.ones(ch))
        cin = ch
    return cin


def conv_tower(x: Tensor, store: ParamStore, prefix: str, n_stages: int, train: bool) -> Tensor:
    """conv 2x2 -> relu -> maxpool 2x2 (while the map allows) -> batchnorm, then global max."""
    for i in range(n_stages):
        x = T.relu(T.conv2d(x, store[f"{prefix}/conv{i}/w"], store[f"{prefix}/conv{i}/b"]))
        if x.shape[-1] >= 2:
            x = T.maxpool2x2(x)
        x = T.batchnorm(x, store[f"{prefix}/bn{i}/gamma"], store[f"{prefix}/bn{i}/beta"],
                        store.buffers[f"{prefix}/bn{i}/running_mean"],
                        store.buffers[f"{prefix}/bn{i}/running_var"], train=train)
    return T.reduce_max(x, axis=(2, 3))


@dataclass
class LatentCode:
    y: Tensor
    mu: Tensor
    sigma: Tensor
    epsilon: np.ndarray


@dataclass
class GraphInfo:
    nadj: Tensor
    adj: Tensor
    first: np.ndarray = None
    second: np.ndarray = None


class SPGra2Seq:
    def __init__(self, cfg: Config, seed: int | None = None, scale: float = 1.0):
        self.cfg = cfg
        self.scale = scale
        self.store = ParamStore()
        self.clusters: ClusterState | None = None
        self.stages = conv_plan(cfg.patch, cfg.ladder)
        if not self.stages:
            raise ValueError(f"patch size {cfg.patch} too small for any conv stage")
        self._init_params(np.random.default_rng(cfg.seed if seed is None else seed))

    # ------------------------------------------------------------ params

    def _init_params(self, rng):
        cfg, s = self.cfg, self.store
        cin = init_conv_tower(s, "cnn", self.stages, rng)
        s.add("cnn/fc/w", rng.normal(0, math.sqrt(1.0 / cin), (cin, cfg.d)))
        s.add("cnn/fc/b", np.zeros(cfg.d))
        for layer in range(cfg.gcn_layers):
            s.add(f"gcn/w{layer}", rng.normal(0, math.sqrt(2.0 / cfg.d), (cfg.d, cfg.d)))
        s.add("gcn/mu/w", rng.normal(0, math.sqrt(1.0 / cfg.d), (cfg.d, cfg.z)))
        s.add("gcn/mu/b", np.zeros(cfg.z))
        s.add("gcn/logvar/w", rng.normal(0, 0.01, (cfg.d, cfg.z)))
        s.add("gcn/logvar/b", np.zeros(cfg.z))
        h = cfg.hidden
        s.add("dec/init/w", rng.normal(0, math.sqrt(1.0 / cfg.z), (cfg.z, 2 * h)))
        s.add("dec/init/b", np.zeros(2 * h))
        s.add("dec/lstm/wx", rng.normal(0, math.sqrt(1.0 / 5), (5, 4 * h)))
        s.add("dec/lstm/wz", rng.normal(0, math.sqrt(1.0 / cfg.z), (cfg.z, 4 * h)))
        s.add("dec/lstm/wh", _orthogonal(rng, h, 4 * h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget gate
        s.add("dec/lstm/b", b)
        s.add("dec/out/w", rng.normal(0, math.sqrt(1.0 / h), (h, 6 * cfg.mixtures + 3)))
        s.add("dec/out/b", np.zeros(6 * cfg.mixtures + 3))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.store.state_dict()
        if self.clusters is not None:
            out.update(self.clusters.state_dict())
        out["data/scale"] = np.array([self.scale], dtype=np.float32)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.store.load_state_dict(state)
        self.clusters = ClusterState.from_state_dict(state)
        if "data/scale" in state:
            self.scale = float(state["data/scale"][0])

    def p(self, name) -> Tensor:
        return self.store[name]

    # ------------------------------------------------------------ encoders

    def cnn_encode(self, images, train: bool) -> Tensor:
        """[n, P, P] rasters -> [n, d] embeddings."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images)[:, None])
        if x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.shape[-1] != self.cfg.patch or x.shape[-2] != self.cfg.patch:
            raise T.ShapeError("cnn_encode", f"expected {self.cfg.patch}px inputs, got {x.shape[-2:]}")
        return T.add(T.matmul(conv_tower(x, self.store, "cnn", len(self.stages), train), self.p("cnn/fc/w")),
                     self.p("cnn/fc/b"))

    def build_graph(self, V: Tensor, masked: np.ndarray, policy: str | None = None, rng=None,
                    centers: np.ndarray | None = None, selection=None) -> GraphInfo:
        """Normalized augmented adjacency [B, M+1, M+1] for a batch of node embeddings.

        For the synonymous policy the cosine weights stay on the tape while the
        top-2 choice is made on the forward values (or taken from ``selection``).
        """
        policy = policy or self.cfg.policy
        B, n, _ = V.shape
        M = n - 1
        masked = np.asarray(masked, dtype=bool).reshape(B, M)
        if policy != "synonymous":
            if rng is None:
                # deterministic encodes (evaluation) still need reproducible random links
                rng = np.random.default_rng([self.cfg.seed, 101])
            mats = []
            for b in range(B):
                if policy == "random":
                    adj = graph.random_adjacency(M, masked=masked[b], rng=rng)
                elif policy == "spatial":
                    adj = graph.spatial_adjacency(centers[b], masked[b], self.cfg.patch)
                else:
                    adj = graph.temporal_adjacency(M, masked[b])
                mats.append(adj.a)
            a = np.stack(mats)
            return GraphInfo(Tensor(graph.normalize(a)), Tensor(a))
        graph.POLICY_CALLS["synonymous"] += 1
        inner = V[:, 1:, :]
        unit = T.div(inner, T.add(T.l2_norm(inner, axis=-1, keepdims=True), 1e-12))
        cos = T.matmul(unit, T.transpose(unit, (0, 2, 1)))
        if selection is None:
            first, second = graph.select_top2(cos.data, masked)
        else:
            first, second = selection
        s1, s2 = graph.selection_masks(first, second, M)
        sel = Tensor(graph.TOP1_WEIGHT * s1 + graph.TOP2_WEIGHT * s2)
        block = T.add(T.mul(T.relu(cos), sel), Tensor(np.eye(M)))
        top = Tensor(np.concatenate([np.full((B, 1, 1), graph.GLOBAL_WEIGHT), np.zeros((B, 1, M))], axis=2))
        left = Tensor(np.full((B, M, 1), graph.GLOBAL_WEIGHT))
        adj = T.concat([top, T.concat([left, block], axis=2)], axis=1)
        deg = T.reduce_sum(adj, axis=-1, keepdims=True)
        inv = T.exp(T.mul(T.log(deg), -0.5))
        nadj = T.mul(T.mul(adj, inv), T.transpose(inv, (0, 2, 1)))
        return GraphInfo(nadj, adj, first, second)

    def gcn_encode(self, V: Tensor, nadj: Tensor, epsilon: np.ndarray | None) -> LatentCode:
        """F = relu(nadj V W) (stacked per gcn_layers), node-mean pool, Gaussian heads.

        ``epsilon=None`` is the deterministic encode (y = mu).
        """
        F = V
        for layer in range(self.cfg.gcn_layers):
            F = T.relu(T.matmul(T.matmul(nadj, F), self.p(f"gcn/w{layer}")))
        pooled = T.reduce_mean(F, axis=1)
        mu = T.add(T.matmul(pooled, self.p("gcn/mu/w")), self.p("gcn/mu/b"))
        logvar = T.add(T.matmul(pooled, self.p("gcn/logvar/w")), self.p("gcn/logvar/b"))
        sigma = T.exp(T.mul(logvar, 0.5))
        if epsilon is None:
            return LatentCode(mu, mu, sigma, np.zeros(mu.shape, dtype=np.float32))
        return LatentCode(T.add(mu, T.mul(sigma, Tensor(epsilon))), mu, sigma, epsilon)

    def encode(self, psets: list[PatchSet], train: bool, rng=None, sample: bool = True,
               policy: str | None = None, selection=None):
        """Patch sets -> (LatentCode, node embeddings V [B, M+1, d], GraphInfo)."""
        B = len(psets)
        n = psets[0].M + 1
        imgs = np.stack([ps.images() for ps in psets]).reshape(B * n, self.cfg.patch, self.cfg.patch)
        V = T.reshape(self.cnn_encode(imgs, train), (B, n, self.cfg.d))
        masked = np.stack([ps.masked for ps in psets])
        centers = np.stack([ps.centers for ps in psets])
        g = self.build_graph(V, masked, policy, rng, centers, selection)
        eps = rng.standard_normal((B, self.cfg.z)).astype(np.float32) if (sample and rng is not None) else None
        return self.gcn_encode(V, g.nadj, eps), V, g

    # ------------------------------------------------------------ decoder

    def _initial_state(self, y: Tensor):
        h = self.cfg.hidden
        hc = T.tanh(T.add(T.matmul(y, self.p("dec/init/w")), self.p("dec/init/b")))
        return hc[:, :h], hc[:, h:]

    def decoder_outputs(self, targets: np.ndarray, y: Tensor) -> Tensor:
        """Teacher-forced decoder head outputs [B, L, 6K + 3]."""
        B, L, _ = targets.shape
        prev = np.concatenate([np.broadcast_to(START_TOKEN, (B, 1, 5)), targets[:, :-1]], axis=1)
        h, c = self._initial_state(y)
        zp = T.add(T.matmul(y, self.p("dec/lstm/wz")), self.p("dec/lstm/b"))
        wx, wh = self.p("dec/lstm/wx"), self.p("dec/lstm/wh")
        hs = []
        for t in range(L):
            h, c = T.lstm_cell(Tensor(prev[:, t]), h, c, wx, wh, zp)
            hs.append(h)
        H = T.stack(hs, axis=1)
        return T.add(T.matmul(H, self.p("dec/out/w")), self.p("dec/out/b"))

    def decode_nll(self, targets: np.ndarray, y: Tensor) -> Tensor:
        """Per-sketch reconstruction NLL [B] for targets padded to a common length."""
        out = self.decoder_outputs(np.asarray(targets, dtype=np.float32), y)
        return mixture_nll(out, targets, self.cfg.mixtures)

    # ------------------------------------------------------------ objective

    def cluster_labels(self, V: Tensor) -> np.ndarray:
        B, n, d = V.shape
        return assign_labels(V.data[:, 1:].reshape(-1, d), self.clusters).reshape(B, n - 1)

    def cluster_reg(self, V: Tensor, labels: np.ndarray, exclude=None) -> Tensor:
        return cluster_reg(V[:, 1:, :], self.clusters.centroids, labels, exclude)

    # ------------------------------------------------------------ generation

    def generate(self, y: np.ndarray, max_len: int | None = None, greedy: bool = True,
                 temperature: float = 1.0, rng=None) -> list[StrokeSeq]:
        """Decode codes [B, z] step by step.

        Greedy mode takes the mean of the most probable mixture component and
        the most probable pen state.  Sequences that never emit an end action
        are truncated at ``max_len``.
        """
        max_len = max_len or self.cfg.max_len
        K, H = self.cfg.mixtures, self.cfg.hidden
        y = np.asarray(y, dtype=np.float32)
        B = len(y)
        st = {k: v.data for k, v in self.store.params.items()}
        hc = np.tanh(y @ st["dec/init/w"] + st["dec/init/b"])
        h, c = hc[:, :H], hc[:, H:]
        zp = y @ st["dec/lstm/wz"] + st["dec/lstm/b"]
        prev = np.broadcast_to(START_TOKEN, (B, 5)).copy()
        actions = np.zeros((B, max_len, 5), dtype=np.float32)
        lengths = np.full(B, max_len)
        done = np.zeros(B, dtype=bool)
        rng = rng or np.random.default_rng(0)
        with T.no_grad():
            for t in range(max_len):
                hn, cn = T.lstm_cell(Tensor(prev), Tensor(h), Tensor(c), Tensor(st["dec/lstm/wx"]),
                                     Tensor(st["dec/lstm/wh"]), Tensor(zp))
                h, c = hn.data, cn.data
                out = h @ st["dec/out/w"] + st["dec/out/b"]
                logit_pi, mux, muy, sx, sy, r = (out[:, i * K:(i + 1) * K] for i in range(6))
                pen_logits = out[:, 6 * K:]
                act = np.zeros((B, 5), dtype=np.float32)
                if greedy:
                    k = logit_pi.argmax(axis=1)
                    rows = np.arange(B)
                    act[:, 0] = mux[rows, k]
                    act[:, 1] = muy[rows, k]
                    pen = pen_logits.argmax(axis=1)
                else:
                    k, dxy = _sample_mixture(logit_pi, mux, muy, sx, sy, r, temperature, rng)
                    act[:, :2] = dxy
                    pl = pen_logits / temperature
                    pp = np.exp(pl - pl.max(axis=1, keepdims=True))
                    pp /= pp.sum(axis=1, keepdims=True)
                    pen = np.array([rng.choice(3, p=row) for row in pp])
                if t == max_len - 1:
                    pen = np.full(B, 2)
                act[np.arange(B), 2 + pen] = 1
                act[pen == 2, :2] = 0
                live = ~done
                actions[live, t] = act[live]
                ended = live & (pen == 2)
                lengths[ended] = t + 1
                done |= ended
                prev = act
                if done.all():
                    break
        return [StrokeSeq(actions[b, :lengths[b]].copy(), self.scale) for b in range(B)]


def _orthogonal(rng, rows, cols):
    a = rng.normal(size=(rows, cols))
    q, _ = np.linalg.qr(a.T if rows < cols else a)
    q = q.T if rows < cols else q
    return q[:rows, :cols]


def _sample_mixture(logit_pi, mux, muy, sx, sy, r, temperature, rng):
    B = len(logit_pi)
    lp = logit_pi / temperature
    pi = np.exp(lp - lp.max(axis=1, keepdims=True))
    pi /= pi.sum(axis=1, keepdims=True)
    k = np.array([rng.choice(pi.shape[1], p=row) for row in pi])
    rows = np.arange(B)
    s1 = np.exp(sx[rows, k]) * math.sqrt(temperature)
    s2 = np.exp(sy[rows, k]) * math.sqrt(temperature)
    rho = np.tanh(r[rows, k])
    z1 = rng.standard_normal(B)
    z2 = rng.standard_normal(B)
    dx = mux[rows, k] + s1 * z1
    dy = muy[rows, k] + s2 * (rho * z1 + np.sqrt(np.clip(1 - rho ** 2, 0, None)) * z2)
    return k, np.stack([dx, dy], axis=1)


def _floor(x: Tensor, lo: float) -> Tensor:
    # max(x, lo) written with relu so the floor stays on the tape
    return T.add(T.relu(T.sub(x, lo)), lo)


def mixture_nll(out: Tensor, targets: np.ndarray, K: int) -> Tensor:
    """Per-sketch sketch-rnn reconstruction loss [B].

    Offset term over steps whose target is not the end action, pen term over
    all steps, both divided by the padded length.
    """
    targets = np.asarray(targets, dtype=np.float32)
    B, L, _ = targets.shape
    logit_pi = out[:, :, 0:K]
    mux, muy = out[:, :, K:2 * K], out[:, :, 2 * K:3 * K]
    lsx = _floor(out[:, :, 3 * K:4 * K], math.log(SIGMA_FLOOR))
    lsy = _floor(out[:, :, 4 * K:5 * K], math.log(SIGMA_FLOOR))
    rho = T.tanh(out[:, :, 5 * K:6 * K])
    pen_logits = out[:, :, 6 * K:]

    dx = Tensor(targets[:, :, 0:1])
    dy = Tensor(targets[:, :, 1:2])
    zx = T.mul(T.sub(dx, mux), T.exp(T.mul(lsx, -1.0)))
    zy = T.mul(T.sub(dy, muy), T.exp(T.mul(lsy, -1.0)))
    one_m = _floor(T.sub(1.0, T.mul(rho, rho)), RHO_FLOOR)
    quad = T.sub(T.add(T.mul(zx, zx), T.mul(zy, zy)), T.mul(T.mul(rho, 2.0), T.mul(zx, zy)))
    log_n = T.sub(T.sub(T.sub(T.mul(T.add(lsx, lsy), -1.0), T.LOG_2PI), T.mul(T.log(one_m), 0.5)),
                  T.div(quad, T.mul(one_m, 2.0)))
    log_mix = T.logsumexp(T.add(T.log_softmax(logit_pi, axis=-1), log_n), axis=-1)   # [B, L]
    live = Tensor(1.0 - targets[:, :, 4])
    offset = T.mul(T.reduce_sum(T.mul(log_mix, live), axis=1), -1.0 / L)
    pen = T.mul(T.reduce_sum(T.mul(T.log_softmax(pen_logits, axis=-1), Tensor(targets[:, :, 2:])),
                             axis=(1, 2)), -1.0 / L)
    return T.add(offset, pen)


def cluster_reg(v: Tensor, centroids: np.ndarray, labels: np.ndarray, exclude=None) -> Tensor:
    """Per-sketch sum of ||v_m - sg(c_k(m))|| over patches [B]; centroids get no gradient."""
    if centroids is None or len(centroids) == 0:
        raise ValueError("empty cluster state")
    c = Tensor(np.asarray(centroids)[np.asarray(labels)])
    dist = T.l2_norm(T.sub(v, c), axis=-1)
    if exclude is not None:
        dist = T.mul(dist, Tensor(1.0 - np.asarray(exclude, dtype=np.float32)))
    return T.reduce_sum(dist, axis=1)


def total_loss(nll: Tensor, reg: Tensor | None, lam: float) -> Tensor:
    """Batch mean of nll + lam * reg (no KL term)."""
    per = nll if (reg is None or lam == 0) else T.add(nll, T.mul(reg, lam))
    return T.reduce_mean(per)
