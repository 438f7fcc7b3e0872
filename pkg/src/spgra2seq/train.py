"""Training loop: per-step patch sets, cluster update, loss, Adam, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import config as config_mod
from .cluster import assign, init_centroids, update
from .config import Config
from .model import SPGra2Seq, total_loss
from .optim import adam_step, clip_grad_norm
from .sketch import PatchSet, make_patchset

log = logging.getLogger(__name__)

CKPT_NAME = "model.spg2"
CFG_NAME = "config.txt"
CURVE_NAME = "loss.csv"
CURVE_FIELDS = ("step", "epoch", "lr", "loss", "nll", "reg", "grad_norm")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: SPGra2Seq
    curve: list = field(default_factory=list)
    steps: int = 0
    out_dir: str | None = None

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.curve]


class BatchSource:
    """Patch sets for training sketches; clean sets are cached, masked ones drawn per step."""

    def __init__(self, seqs, cfg: Config):
        self.seqs = list(seqs)
        self.cfg = cfg
        self._clean: dict[int, PatchSet] = {}
        self.targets = np.stack([s.padded(cfg.max_len) for s in self.seqs])
        lengths = [len(s) for s in self.seqs]
        self.width = min(cfg.max_len, max(lengths)) if lengths else 0

    def clean(self, i: int) -> PatchSet:
        if i not in self._clean:
            self._clean[i] = make_patchset(self.seqs[i], self.cfg.canvas, self.cfg.patch, self.cfg.M)[0]
        return self._clean[i]

    def patchsets(self, ids, mask: float, seed) -> list[PatchSet]:
        if mask <= 0:
            return [self.clean(i) for i in ids]
        return [make_patchset(self.seqs[i], self.cfg.canvas, self.cfg.patch, self.cfg.M,
                              mask, [*np.atleast_1d(seed).tolist(), int(i)])[0] for i in ids]

    def batch_targets(self, ids) -> np.ndarray:
        # every batch is cut to the longest sequence in the training set so
        # the per-sketch normalisation length is the same on every step
        return self.targets[np.asarray(ids), :self.width]


def steps_per_epoch(n: int, batch: int) -> int:
    return max(1, math.ceil(n / batch))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def batch_ids(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    spe = steps_per_epoch(n, batch)
    epoch, pos = divmod(step, spe)
    return epoch_order(seed, epoch, n)[pos * batch:(pos + 1) * batch]


def learning_rate(cfg: Config, epoch: int) -> float:
    return cfg.lr * cfg.decay ** epoch


def train_step(model: SPGra2Seq, source: BatchSource, ids, step: int, epoch: int) -> dict:
    """One optimisation step; returns the curve row."""
    cfg = model.cfg
    rng = np.random.default_rng([cfg.seed, step])
    psets = source.patchsets(ids, cfg.mask, [cfg.seed, step])
    code, V, _ = model.encode(psets, train=True, rng=rng)
    masked = np.stack([ps.masked for ps in psets])
    reg = None
    if cfg.cluster:
        flat = V.data[:, 1:].reshape(-1, cfg.d)
        keep = ~masked.reshape(-1)
        if model.clusters is None:
            model.clusters = init_centroids(flat[keep] if keep.any() else flat, cfg.K, cfg.seed, cfg.eta)
        q = assign(flat, model.clusters)
        labels = q.argmax(axis=1).reshape(masked.shape)
        # centroids move first (current embeddings), then the regulariser uses them
        model.clusters = update(flat, q, model.clusters, exclude=masked)
        if cfg.lam > 0:
            reg = model.cluster_reg(V, labels, exclude=masked)
    nll = model.decode_nll(source.batch_targets(ids), code.y)
    loss = total_loss(nll, reg, cfg.lam)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at step {step} (batch ids {list(map(int, ids))})")
    loss.backward()
    norm = clip_grad_norm(model.store, cfg.clip) if cfg.clip > 0 else float("nan")
    lr = learning_rate(cfg, epoch)
    adam_step(model.store, lr)
    model.store.zero_grad()
    return {"step": step, "epoch": epoch, "lr": lr, "loss": value, "nll": float(nll.data.mean()),
            "reg": float(reg.data.mean()) if reg is not None else 0.0, "grad_norm": norm}


def save_checkpoint(model: SPGra2Seq, path, step: int):
    state = model.state_dict()
    state["train/step"] = np.array([step], dtype=np.float32)
    checkpoint.save(path, state)
    config_mod.save(model.cfg, os.path.splitext(str(path))[0] + ".cfg")


def load_model(path, cfg: Config | None = None) -> tuple[SPGra2Seq, int]:
    """Model (and completed step count) from a checkpoint and its config sidecar."""
    side = os.path.splitext(str(path))[0] + ".cfg"
    if cfg is None:
        cfg = config_mod.load(side if os.path.exists(side) else None)
    state = checkpoint.load(path)
    model = SPGra2Seq(cfg)
    model.load_state_dict(state)
    step = int(state["train/step"][0]) if "train/step" in state else 0
    return model, step


def _write_curve(path, rows, append: bool):
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_FIELDS)
        if mode == "w":
            w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]) for k in CURVE_FIELDS})


def train(seqs, cfg: Config, out_dir=None, resume=None, scale: float = 1.0, stop_after: int | None = None,
          log_every: int = 50) -> TrainResult:
    """Train on ``seqs``.

    The total length is ``max_steps`` when positive, otherwise ``epochs`` full
    passes.  ``resume`` continues from a checkpoint written by this function;
    batch order, masking and sampling noise depend only on (seed, step), so a
    resumed run follows the uninterrupted one exactly.  ``stop_after`` ends the
    call early (after that many steps in this call) without changing the
    schedule.
    """
    cfg.validate()
    seqs = list(seqs)
    if not seqs:
        raise TrainingError("empty training corpus")
    n = len(seqs)
    spe = steps_per_epoch(n, cfg.batch)
    total = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * spe
    if resume is not None:
        model, start = load_model(resume, cfg)
    else:
        model, start = SPGra2Seq(cfg, scale=scale), 0
    source = BatchSource(seqs, cfg)
    ckpt = os.path.join(out_dir, CKPT_NAME) if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        config_mod.save(cfg, os.path.join(out_dir, CFG_NAME))
    curve = []
    end = total if stop_after is None else min(total, start + stop_after)
    for step in range(start, end):
        epoch = step // spe
        ids = batch_ids(cfg.seed, step, n, cfg.batch)
        try:
            row = train_step(model, source, ids, step, epoch)
        except TrainingError:
            if out_dir:
                with open(os.path.join(out_dir, "nan_dump.txt"), "w") as f:
                    f.write(f"step={step}\nepoch={epoch}\nbatch_ids={' '.join(map(str, ids))}\n")
            raise
        curve.append(row)
        if log_every and (step % log_every == 0 or step == end - 1):
            log.info("step %d epoch %d loss %.4f nll %.4f reg %.4f", step, epoch, row["loss"], row["nll"], row["reg"])
        if ckpt and (step + 1) % spe == 0 and ((step + 1) // spe) % cfg.ckpt_every == 0:
            save_checkpoint(model, ckpt, step + 1)
    if ckpt:
        save_checkpoint(model, ckpt, end)
        _write_curve(os.path.join(out_dir, CURVE_NAME), curve, append=resume is not None)
    return TrainResult(model, curve, end, out_dir)
