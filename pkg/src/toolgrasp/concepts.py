"""Concept layer on a frozen grasp network, and feature-class correlation.

The layer is a side branch: it global-average-pools the deepest encoder
plane of the base network and projects it to ``F`` squashed concept
activations.  The base network is never written to; its forward pass runs
without a tape, so no gradient can reach it.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset import CLASS_NAMES, write_ppm
from .ggcnn import GraspNet, make_optimizer, GgcnnConfig
from .tensor import Param, Tensor

CONCEPT_NAMES = ("hex_key", "striking_head", "rasp_face", "blade", "jaws", "shear_blades", "tip", "open_jaw")
SPARSITY_WEIGHT = 1e-3
PRESENCE_THRESHOLD = 0.6


class ConceptError(ValueError):
    pass


def default_feature_names(n_features: int, n_classes: int = len(CLASS_NAMES)) -> tuple[str, ...]:
    named = list(CONCEPT_NAMES[:n_classes]) + [f"class{c}" for c in range(len(CONCEPT_NAMES), n_classes)]
    return tuple(named[:n_features]) + tuple(f"free{i}" for i in range(n_features - n_classes))


class ConceptLayer:
    """Projection from pooled trunk activations to ``n_features`` concepts.

    The first ``n_classes`` features are each tied to one class during
    fine-tuning; the rest are free features kept sparse.
    """

    def __init__(self, base: GraspNet, n_features: int, seed: int = 0, n_classes: int = len(CLASS_NAMES), feature_names=None):
        if n_features < 1:
            raise ConceptError(f"need at least one concept feature, got {n_features}")
        if n_features < n_classes:
            raise ConceptError(f"need n_features >= n_classes ({n_classes}), got {n_features}")
        self.base = base
        self.n_features = n_features
        self.n_classes = n_classes
        self.seed = seed
        dim = base.cfg.channels[-1]
        rng = np.random.default_rng([seed, 31337])
        self.projection = Param(T.he_uniform((n_features, dim), dim, rng) * 0.5, "concept.projection")
        self.bias = Param(np.zeros(n_features), "concept.bias")
        self.feature_names = tuple(feature_names) if feature_names else default_feature_names(n_features, n_classes)
        if len(self.feature_names) != n_features:
            raise ConceptError("feature_names must have one entry per feature")

    def parameters(self) -> list[Param]:
        return [self.projection, self.bias]

    def pooled(self, image: np.ndarray) -> np.ndarray:
        """Global average of the base network's deepest encoder plane, (D,) or (N, D)."""
        x = np.asarray(image, dtype=float)
        self.base.check_input(x)
        return T.global_avg_pool(self.base.encode(Tensor(x))).data

    def logits(self, pooled) -> Tensor:
        return T.linear(pooled if isinstance(pooled, Tensor) else Tensor(pooled), self.projection, self.bias)

    def extract(self, image: np.ndarray) -> np.ndarray:
        """Concept activations in [0, 1] for one prepared (C, H, W) image."""
        return T.sigmoid(self.logits(self.pooled(image))).data.copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"concept.projection": self.projection.data.copy(), "concept.bias": self.bias.data.copy()}

    def load_state_dict(self, state) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise T.CheckpointError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.value = Tensor(state[p.name])

    def config_text(self) -> str:
        return (
            f"concept.n_features={self.n_features}\n"
            f"concept.n_classes={self.n_classes}\n"
            f"concept.seed={self.seed}\n"
            f"concept.feature_names={','.join(self.feature_names)}\n"
            f"concept.presence_threshold={PRESENCE_THRESHOLD}\n"
        )


def attach(base: GraspNet, n_features: int, seed: int = 0, n_classes: int = len(CLASS_NAMES)) -> ConceptLayer:
    return ConceptLayer(base, n_features, seed, n_classes)


def extract_concepts(layer: ConceptLayer, image: np.ndarray) -> np.ndarray:
    return layer.extract(image)


def concept_loss(layer: ConceptLayer, pooled: np.ndarray, labels: np.ndarray, sparsity: float = SPARSITY_WEIGHT) -> Tensor:
    """Indicator MSE on the class-tied features plus a mean-activation penalty on the free ones."""
    act = T.sigmoid(layer.logits(Tensor(pooled)))
    target = np.zeros((len(labels), layer.n_classes))
    target[np.arange(len(labels)), labels] = 1.0
    loss = T.mse_loss(T.take(act, np.s_[:, : layer.n_classes]), Tensor(target))
    if layer.n_features > layer.n_classes and sparsity:
        loss = T.add(loss, T.scale(T.mean(T.take(act, np.s_[:, layer.n_classes :])), sparsity))
    return loss


def finetune_concepts(
    layer: ConceptLayer,
    dataset: Sequence[tuple[np.ndarray, int]],
    epochs: int = 100,
    lr: float = 0.02,
    optimizer: str = "adam",
    sparsity: float = SPARSITY_WEIGHT,
) -> list[float]:
    """Train only the projection; one full-batch step per epoch.

    Images are prepared (C, H, W) network inputs.  Returns the loss recorded
    before each step.
    """
    if not dataset:
        raise ConceptError("fine-tuning needs a non-empty dataset")
    labels = np.array([int(c) for _, c in dataset])
    if labels.min() < 0 or labels.max() >= layer.n_classes:
        raise ConceptError(f"labels must lie in [0, {layer.n_classes})")
    pooled = np.stack([layer.pooled(img) for img, _ in dataset])
    opt = make_optimizer(GgcnnConfig(optimizer=optimizer, lr=lr), layer.parameters())
    history = []
    for epoch in range(epochs):
        with T.Tape() as tape:
            loss = concept_loss(layer, pooled, labels, sparsity)
            value = loss.item()
            if not math.isfinite(value):
                raise T.GradientError(f"non-finite concept loss at epoch {epoch}")
            tape.backward(loss)
        history.append(value)
        opt.step()
    return history


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

@dataclass
class CorrelationMatrix:
    values: np.ndarray  # (F, C)
    feature_names: tuple[str, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        f, c = self.values.shape
        if len(self.feature_names) != f or len(self.class_names) != c:
            raise ConceptError("name lists do not match the matrix shape")
        if np.any(np.abs(self.values) > 1.0):
            raise ConceptError("correlations must lie in [-1, 1]")


def pearson_matrix(activations: np.ndarray, labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Pearson correlation of each activation column with each one-hot class column.

    Two-pass (centred) computation in float64.  A zero-variance feature
    correlates 0 with everything.
    """
    acts = np.asarray(activations, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts < 2):
        missing = [int(c) for c in np.nonzero(counts < 2)[0]]
        raise ConceptError(f"every class needs at least two samples; short: {missing}")
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    a = acts - acts.mean(axis=0)
    b = onehot - onehot.mean(axis=0)
    a_ss = np.einsum("ij,ij->j", a, a)
    b_ss = np.einsum("ij,ij->j", b, b)
    dead = a_ss == 0
    if dead.any():
        warnings.warn(f"features {np.nonzero(dead)[0].tolist()} have zero variance; correlation set to 0", stacklevel=2)
    out = np.zeros((acts.shape[1], n_classes))
    live = ~dead
    # one square root of the product keeps a feature identical to an indicator at exactly 1
    out[live] = np.einsum("if,ic->fc", a[:, live], b) / np.sqrt(np.outer(a_ss[live], b_ss))
    return np.clip(out, -1.0, 1.0)


def compute_correlation(layer: ConceptLayer, dataset: Sequence[tuple[np.ndarray, int]], class_names=CLASS_NAMES) -> CorrelationMatrix:
    acts = np.stack([layer.extract(img) for img, _ in dataset])
    labels = [int(c) for _, c in dataset]
    values = pearson_matrix(acts, labels, layer.n_classes)
    return CorrelationMatrix(values, layer.feature_names, tuple(class_names[: layer.n_classes]))


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------

def diverging_rgb(values: np.ndarray) -> np.ndarray:
    """Blue (-1) through white (0) to red (+1), as uint8 RGB."""
    v = np.clip(np.asarray(values, dtype=float), -1.0, 1.0)
    rgb = np.full(v.shape + (3,), 255.0)
    neg, pos = v < 0, v > 0
    rgb[neg, 0] = rgb[neg, 1] = 255.0 * (1.0 + v[neg])
    rgb[pos, 1] = rgb[pos, 2] = 255.0 * (1.0 - v[pos])
    return np.rint(rgb).astype(np.uint8)


def export_heatmap(m: CorrelationMatrix, path, cell: int = 16) -> tuple[Path, Path]:
    """Write ``path`` (binary PPM, one ``cell``-pixel square per entry) and ``path.txt``."""
    path = Path(path)
    rgb = diverging_rgb(m.values)
    image = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    write_ppm(path, image)
    text_path = Path(str(path) + ".txt")
    text_path.write_text(format_matrix(m))
    return path, text_path


def format_matrix(m: CorrelationMatrix) -> str:
    f, c = m.values.shape
    lines = [
        f"# features: {','.join(m.feature_names)}",
        f"# classes: {','.join(m.class_names)}",
        f"{f} {c}",
    ]
    lines += [" ".join(repr(float(v)) for v in row) for row in m.values]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> CorrelationMatrix:
    feature_names = class_names = None
    rows = []
    shape = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("# features:"):
            feature_names = tuple(line.split(":", 1)[1].strip().split(","))
            continue
        if line.startswith("# classes:"):
            class_names = tuple(line.split(":", 1)[1].strip().split(","))
            continue
        if line.startswith("#"):
            continue
        try:
            numbers = [float(v) for v in line.split()]
        except ValueError as exc:
            raise ConceptError(f"line {lineno}: {exc}") from exc
        if shape is None:
            if len(numbers) != 2:
                raise ConceptError(f"line {lineno}: expected 'F C' header")
            shape = (int(numbers[0]), int(numbers[1]))
            continue
        if len(numbers) != shape[1]:
            raise ConceptError(f"line {lineno}: expected {shape[1]} values, got {len(numbers)}")
        rows.append(numbers)
    if shape is None or len(rows) != shape[0]:
        raise ConceptError("matrix dump is truncated")
    values = np.array(rows, dtype=float).reshape(shape)
    feature_names = feature_names or tuple(f"f{i}" for i in range(shape[0]))
    class_names = class_names or tuple(f"c{i}" for i in range(shape[1]))
    return CorrelationMatrix(values, feature_names, class_names)


def similar_classes_summary(m: CorrelationMatrix, top: int = 3) -> str:
    """Class pairs whose correlation columns agree most, as plain text.

    Shared concept structure between classes is reported for inspection,
    not judged.
    """
    cols = m.values.T
    c = len(cols)
    pairs = []
    for i in range(c):
        for j in range(i + 1, c):
            a, b = cols[i], cols[j]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            sim = float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0
            pairs.append((-sim, i, j))
    pairs.sort()
    lines = ["most similar class pairs (cosine of correlation columns):"]
    for neg, i, j in pairs[:top]:
        lines.append(f"  {m.class_names[i]} / {m.class_names[j]}: {-neg:+.3f}")
    return "\n".join(lines)
