"""Classifiers, toy defenses, the confidence detector and fixture data/training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, GraphBuilder, NaNError, Vertex, forward, param_gradients

IMAGE_SHAPE = (1, 8, 8)
NUM_CLASSES = 4


@dataclass(frozen=True)
class Detector:
    """Accepts an input iff the top class probability reaches ``threshold``."""

    threshold: float
    kind: str = "confidence-threshold"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"detector threshold must lie in (0, 1), got {self.threshold}")
        if self.kind != "confidence-threshold":
            raise ValueError(f"unknown detector kind {self.kind!r}")

    def accepts(self, probs: np.ndarray) -> np.ndarray:
        return (np.max(probs, axis=-1) >= self.threshold).astype(np.int64)


@dataclass
class Classifier:
    graph: Graph
    num_classes: int
    detector: Detector | None = None
    name: str = "model"

    def __post_init__(self):
        if self.graph[self.graph.probs_id].out_shape != (self.num_classes,):
            raise ValueError("probs tap does not have num_classes entries")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.graph.input_shape

    @property
    def is_randomized(self) -> bool:
        return self.graph.is_randomized()

    def probs(self, x, rng=None) -> np.ndarray:
        return forward(self.graph, x, rng)[1]

    def predict(self, x, rng=None):
        return np.argmax(self.probs(x, rng), axis=-1)


@dataclass
class Dataset:
    x: np.ndarray  # (N, *IMAGE_SHAPE) in [0, 1]
    y: np.ndarray  # (N,) int labels
    name: str = "data"
    num_classes: int = NUM_CLASSES
    ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.y), dtype=np.int64)
        if len(self.x) != len(self.y) or len(self.ids) != len(self.y):
            raise ValueError("x, y and ids must have equal length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.name, self.num_classes, self.ids[idx])


# --------------------------------------------------------------------------
# fixture data


def _bar_image(label: int, rng: np.random.Generator) -> np.ndarray:
    img = rng.uniform(0.0, 0.25, (8, 8))
    level = rng.uniform(0.6, 1.0)
    pos = rng.integers(1, 7)
    r, c = np.indices((8, 8))
    if label == 0:
        mask = r == pos
    elif label == 1:
        mask = c == pos
    elif label == 2:
        mask = (c - r) == pos - 4
    else:
        mask = (r + c) == pos + 3
    img[mask] = level
    img += rng.normal(0.0, 0.05, (8, 8))
    return np.clip(img, 0.0, 1.0)


def _blob_image(label: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = [(2, 2), (2, 5), (5, 2), (5, 5)][label]
    cy += rng.normal(0, 0.5)
    cx += rng.normal(0, 0.5)
    r, c = np.indices((8, 8))
    img = rng.uniform(0.6, 1.0) * np.exp(-((r - cy) ** 2 + (c - cx) ** 2) / 3.0)
    img += rng.uniform(0.0, 0.2, (8, 8))
    return np.clip(img, 0.0, 1.0)


def make_fixture_dataset(kind: str = "bars", n: int = 400, seed: int = 0) -> Dataset:
    """Deterministic 8x8 grayscale images, four balanced classes."""
    if n <= 0:
        raise ValueError("n must be positive")
    draw = {"bars": _bar_image, "blobs": _blob_image}.get(kind)
    if draw is None:
        raise ValueError(f"unknown fixture kind {kind!r}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES)
    xs = np.stack([draw(int(lbl), rng)[None] for lbl in labels])
    return Dataset(xs, labels, name=f"{kind}-{n}-{seed}")


# --------------------------------------------------------------------------
# fixture models


def build_mlp(rng: np.random.Generator, hidden: int = 64, num_classes: int = NUM_CLASSES,
              input_shape=IMAGE_SHAPE) -> Graph:
    d = int(np.prod(input_shape))
    b = GraphBuilder(input_shape)
    h = b.add("flatten", ["input"], "flatten", block="model")
    h = b.add("dense", [h], "dense1", block="model", params={
        "W": rng.normal(0, math.sqrt(2.0 / d), (hidden, d)), "b": np.zeros(hidden)})
    h = b.add("relu", [h], "relu1", block="model")
    logits = b.add("dense", [h], "logits", block="model", params={
        "W": rng.normal(0, math.sqrt(1.0 / hidden), (num_classes, hidden)), "b": np.zeros(num_classes)})
    probs = b.add("softmax", [logits], "probs", block="model")
    return b.build(logits, probs)


def build_cnn(rng: np.random.Generator, channels: int = 8, num_classes: int = NUM_CLASSES,
              input_shape=IMAGE_SHAPE) -> Graph:
    c, hgt, wid = input_shape
    b = GraphBuilder(input_shape)
    h = b.add("conv2d", ["input"], "conv1", block="model", params={
        "W": rng.normal(0, math.sqrt(2.0 / (9 * c)), (channels, c, 3, 3)), "b": np.zeros(channels)})
    h = b.add("relu", [h], "relu1", block="model")
    h = b.add("flatten", [h], "flatten", block="model")
    d = channels * hgt * wid
    logits = b.add("dense", [h], "logits", block="model", params={
        "W": rng.normal(0, math.sqrt(1.0 / d), (num_classes, d)), "b": np.zeros(num_classes)})
    probs = b.add("softmax", [logits], "probs", block="model")
    return b.build(logits, probs)


class TrainingDiverged(FloatingPointError):
    pass


def train_fixture(dataset: Dataset, arch: str = "mlp", epochs: int = 30, seed: int = 0,
                  lr: float = 0.1, batch_size: int = 32) -> Classifier:
    """Minibatch SGD on softmax cross-entropy; deterministic given ``seed``."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    builder = {"mlp": build_mlp, "cnn": build_cnn}.get(arch)
    if builder is None:
        raise ValueError(f"unknown architecture {arch!r}")
    graph = builder(rng, num_classes=dataset.num_classes, input_shape=dataset.x.shape[1:])
    n = len(dataset)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            try:
                _, probs, trace = forward(graph, dataset.x[idx])
            except NaNError as e:
                raise TrainingDiverged(f"training produced non-finite values at {e.vertex_id}") from None
            onehot = np.eye(dataset.num_classes)[dataset.y[idx]]
            loss = -np.mean(np.log(np.clip(probs[np.arange(len(idx)), dataset.y[idx]], 1e-300, None)))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"training loss became {loss}")
            seed_grad = (probs - onehot) / len(idx)
            grads = param_gradients(graph, trace, {graph.logits_id: seed_grad})
            for vid, pg in grads.items():
                v = graph[vid]
                for k, gk in pg.items():
                    v.params[k] = v.params[k] - lr * gk
    return Classifier(graph, dataset.num_classes, name=f"{arch}-fixture")


def accuracy(model: Classifier, data: Dataset, rng=None) -> float:
    return float(np.mean(model.predict(data.x, rng) == data.y))


# --------------------------------------------------------------------------
# defenses


def _check_defense(d: dict) -> dict:
    kind = d.get("type")
    out = {"type": kind}
    if kind == "quantize":
        levels = d.get("levels", 8)
        if int(levels) != levels or levels < 2:
            raise ValueError(f"quantize levels must be an integer >= 2, got {levels}")
        out["levels"] = int(levels)
    elif kind == "gaussian-noise":
        sigma = float(d.get("sigma", 0.05))
        if not (sigma >= 0 and math.isfinite(sigma)):
            raise ValueError(f"noise sigma must be >= 0, got {sigma}")
        out["sigma"] = sigma
    elif kind == "reverse-sigmoid":
        beta, gamma = float(d.get("beta", 0.7)), float(d.get("gamma", 0.3))
        if not 0.0 <= beta <= 1.0 or not gamma > 0:
            raise ValueError(f"reverse-sigmoid needs beta in [0,1] and gamma > 0, got {beta}, {gamma}")
        out.update(beta=beta, gamma=gamma)
    else:
        raise ValueError(f"unknown defense {kind!r}")
    extra = set(d) - set(out)
    if extra:
        raise ValueError(f"unexpected keys for {kind}: {sorted(extra)}")
    return out


def make_defended(model: Classifier, defenses: list[dict], detector: Detector | float | None = None,
                  name: str | None = None) -> Classifier:
    """Wrap a classifier with input-side and output-side defense vertices.

    Input defenses (quantize, gaussian-noise) are chained after the input in
    the given order; reverse-sigmoid layers are appended after the probability
    tap, which then points at the last of them.
    """
    defenses = [_check_defense(dict(d)) for d in defenses]
    if isinstance(detector, (int, float)):
        detector = Detector(float(detector))
    g = model.graph.copy()
    verts = list(g.vertices)
    inp = g.input_id
    shape = g.input_shape
    pre, post = [], []
    prev = inp
    for i, d in enumerate(defenses):
        attrs = {k: v for k, v in d.items() if k != "type"}
        if d["type"] in ("quantize", "gaussian-noise"):
            vid = f"def{i}_{d['type']}"
            pre.append(Vertex(vid, d["type"], [prev], shape, attrs=attrs))
            prev = vid
    for v in verts[1:]:
        v.inputs = [prev if s == inp else s for s in v.inputs]
    probs = g.probs_id
    for i, d in enumerate(defenses):
        if d["type"] == "reverse-sigmoid":
            vid = f"def{i}_{d['type']}"
            post.append(Vertex(vid, d["type"], [probs], (model.num_classes,),
                                       attrs={k: v for k, v in d.items() if k != "type"}))
            probs = vid
    graph = Graph([verts[0]] + pre + verts[1:] + post, inp, g.logits_id, probs)
    return Classifier(graph, model.num_classes, detector, name or f"{model.name}+defended")


class NoDetector(RuntimeError):
    pass


def detect(classifier: Classifier, x, rng=None):
    """1 if the detector accepts ``x`` (batch -> array of 0/1)."""
    if classifier.detector is None:
        raise NoDetector("classifier has no detector")
    acc = classifier.detector.accepts(classifier.probs(x, rng))
    return int(acc) if np.ndim(acc) == 0 else acc
