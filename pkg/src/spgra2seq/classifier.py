"""Small CNN sketch classifier used to score Rec (category preserved by generation)."""

from __future__ import annotations

import logging
import math

import numpy as np

from . import checkpoint
from . import tensor as T
from .model import conv_plan, conv_tower, init_conv_tower
from .optim import ParamStore, adam_step
from .sketch import rasterize, resize
from .tensor import Tensor

log = logging.getLogger(__name__)


class ClassifierError(ValueError):
    pass


def sketch_images(seqs, size: int = 32, canvas: int = 128) -> np.ndarray:
    """Full-sketch rasters at ``canvas`` pixels, downsampled to ``size``."""
    if not len(seqs):
        return np.zeros((0, size, size), dtype=np.float32)
    return np.stack([resize(rasterize(s, canvas).pixels, size) for s in seqs]).astype(np.float32)


class SketchClassifier:
    def __init__(self, categories, size: int = 32, ladder=(8, 16, 32), seed: int = 0):
        self.categories = list(categories)
        self.size = size
        self.ladder = tuple(ladder)
        self.stages = conv_plan(size, ladder)
        self.heldout_accuracy: float | None = None
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        cin = init_conv_tower(self.store, "clf", self.stages, rng)
        n = len(self.categories)
        self.store.add("clf/fc/w", rng.normal(0, math.sqrt(1.0 / cin), (cin, n)))
        self.store.add("clf/fc/b", np.zeros(n))

    def logits(self, images: np.ndarray, train: bool) -> Tensor:
        x = Tensor(np.asarray(images, dtype=np.float32)[:, None])
        feats = conv_tower(x, self.store, "clf", len(self.stages), train)
        return T.add(T.matmul(feats, self.store["clf/fc/w"]), self.store["clf/fc/b"])

    def predict_images(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch):
                out.append(self.logits(images[i:i + batch], train=False).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def predict(self, seqs) -> np.ndarray:
        return self.predict_images(sketch_images(seqs, self.size))

    def accuracy(self, seqs, labels) -> float:
        labels = np.asarray(labels)
        return 100.0 * float((self.predict(seqs) == labels).mean()) if len(labels) else 0.0

    def state_dict(self) -> dict:
        out = self.store.state_dict()
        out["meta/size"] = np.array([self.size], dtype=np.float32)
        out["meta/ladder"] = np.array(self.ladder, dtype=np.float32)
        out["meta/heldout"] = np.array([-1.0 if self.heldout_accuracy is None else self.heldout_accuracy],
                                       dtype=np.float32)
        for i, c in enumerate(self.categories):
            out[f"meta/category/{i}/{c}"] = np.zeros(1, dtype=np.float32)
        return out

    def save(self, path):
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "SketchClassifier":
        state = checkpoint.load(path)
        cats = sorted((k for k in state if k.startswith("meta/category/")), key=lambda k: int(k.split("/")[2]))
        clf = cls([k.split("/", 3)[3] for k in cats], int(state["meta/size"][0]),
                  tuple(int(x) for x in state["meta/ladder"]))
        clf.store.load_state_dict(state)
        held = float(state["meta/heldout"][0])
        clf.heldout_accuracy = None if held < 0 else held
        return clf


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1], dtype=np.float32)[labels]
    return T.mul(T.reduce_mean(T.reduce_sum(T.mul(T.log_softmax(logits, axis=1), Tensor(onehot)), axis=1)), -1.0)


def train_classifier(seqs, labels, categories, seed: int = 0, epochs: int = 15, batch: int = 32,
                     lr: float = 3e-3, heldout: float = 0.2, size: int = 32) -> SketchClassifier:
    """Fit on a seeded (1 - heldout) share; report accuracy on the rest."""
    categories = list(categories)
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2 or len(categories) < 2:
        raise ClassifierError("classifier needs at least two categories")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(seqs))
    n_held = int(round(heldout * len(seqs)))
    held, fit = order[:n_held], order[n_held:]
    images = sketch_images(seqs, size)
    clf = SketchClassifier(categories, size, seed=seed)
    for epoch in range(epochs):
        perm = fit[np.random.default_rng([seed, epoch]).permutation(len(fit))]
        for i in range(0, len(perm), batch):
            ids = perm[i:i + batch]
            if len(ids) < 2:
                continue
            loss = cross_entropy(clf.logits(images[ids], train=True), labels[ids])
            loss.backward()
            adam_step(clf.store, lr)
            clf.store.zero_grad()
        log.debug("classifier epoch %d loss %.4f", epoch, float(loss.data))
    if n_held:
        clf.heldout_accuracy = 100.0 * float((clf.predict_images(images[held]) == labels[held]).mean())
    return clf
