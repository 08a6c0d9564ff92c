"""Generative grasping network: depth in, dense grasp maps out.

The network is fully convolutional: strided convolutions down, transposed
convolutions back up to the input resolution, and four 1x1 heads for
quality, cos(2θ), sin(2θ) and width.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .geometry import GraspRect, wrap_angle
from .tensor import Param, Tensor

log = logging.getLogger(__name__)

DEPTH_CLIP = 0.15


class ConfigError(ValueError):
    pass


@dataclass
class GgcnnConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (8, 16, 32)
    kernel_sizes: tuple[int, ...] = (5, 5, 5)
    strides: tuple[int, ...] = (2, 2, 2)
    width_max: float = 60.0
    smoothing_sigma: float = 2.0
    optimizer: str = "adam"
    lr: float = 0.005
    momentum: float = 0.0
    epochs: int = 40
    batch_size: int = 4
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.strides = tuple(int(s) for s in self.strides)
        if not (len(self.channels) == len(self.kernel_sizes) == len(self.strides)) or not self.channels:
            raise ConfigError("channels, kernel_sizes and strides need equal, non-zero length")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError("kernel sizes must be odd")
        if self.width_max <= 0:
            raise ConfigError("width_max must be positive")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> GgcnnConfig:
        return cls(**parse_config_values(text, cls))


def parse_config_values(text: str, cls, prefix: str = "") -> dict:
    """Parse ``key=value`` lines into constructor kwargs for dataclass ``cls``.

    Only keys starting with ``prefix`` are considered (prefix stripped);
    unknown keys are ignored so several configs can share one file.
    """
    types = {f.name: f.type for f in fields(cls)}
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key.startswith(prefix):
            continue
        key = key[len(prefix) :]
        if key not in types:
            continue
        default = defaults[key]
        try:
            if isinstance(default, bool):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                out[key] = value.lower() in ("true", "1")
            elif isinstance(default, tuple):
                out[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif isinstance(default, int):
                out[key] = int(value)
            elif isinstance(default, float):
                out[key] = float(value)
            else:
                out[key] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return out


@dataclass
class GraspMaps:
    """Per-pixel grasp planes, all of shape (H, W)."""

    quality: np.ndarray
    cos2t: np.ndarray
    sin2t: np.ndarray
    width: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.quality.shape

    def angle(self) -> np.ndarray:
        return 0.5 * np.arctan2(self.sin2t, self.cos2t)


def normalize_depth(depth: np.ndarray, clip: float = DEPTH_CLIP) -> np.ndarray:
    """Median-centre, clamp to ``±clip`` and rescale to [-1, 1]."""
    depth = np.asarray(depth, dtype=float)
    if not np.isfinite(depth).all():
        raise ValueError("depth contains non-finite values")
    centred = depth - np.median(depth)
    return np.clip(centred, -clip, clip) / clip


# ---------------------------------------------------------------------------
# targets and decoding
# ---------------------------------------------------------------------------

def encode_targets(gts: Sequence[GraspRect], height: int, width: int) -> GraspMaps:
    """Training targets: each grasp's centre third gets quality 1 and its angle/width.

    Grasps are painted in list order, so a later grasp overwrites an earlier
    one where their centre thirds overlap.  A grasp too small to cover any
    pixel centre still marks the pixel nearest its centre.
    """
    quality = np.zeros((height, width))
    cos2t = np.zeros((height, width))
    sin2t = np.zeros((height, width))
    wmap = np.zeros((height, width))
    rows, cols = np.mgrid[0:height, 0:width]
    for g in gts:
        core = GraspRect(g.x, g.y, g.w / 3, g.h / 3, g.theta)
        region = core.contains(cols, rows)
        if not region.any():
            r, c = int(round(g.y)), int(round(g.x))
            if 0 <= r < height and 0 <= c < width:
                region[r, c] = True
        quality[region] = 1.0
        cos2t[region] = math.cos(2 * g.theta)
        sin2t[region] = math.sin(2 * g.theta)
        wmap[region] = g.w
    return GraspMaps(quality, cos2t, sin2t, wmap)


def decode_grasps(maps: GraspMaps, k: int = 1, smoothing_sigma: float = 2.0) -> list[tuple[GraspRect, float]]:
    """Top-``k`` local maxima of the (optionally smoothed) quality map.

    Map index ``[row, col]`` becomes grasp centre ``x=col, y=row``.  Equal
    scores are ordered row-major.  The jaw size is fixed at half the width and
    widths are floored at one pixel.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(maps.quality, dtype=float)
    if smoothing_sigma > 0:
        q = ndimage.gaussian_filter(q, smoothing_sigma, mode="nearest")
    peaks = ndimage.maximum_filter(q, size=3, mode="constant", cval=-np.inf) == q
    rows, cols = np.nonzero(peaks)
    scores = q[rows, cols]
    order = np.lexsort((cols, rows, -scores))[:k]
    out = []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        theta = 0.5 * math.atan2(maps.sin2t[r, c], maps.cos2t[r, c])
        w = max(float(maps.width[r, c]), 1.0)
        out.append((GraspRect(float(c), float(r), w, w / 2, wrap_angle(theta)), float(scores[i])))
    return out


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

HEADS = ("quality", "cos2t", "sin2t", "width")


class GraspNet:
    """Encoder/decoder grasp network with four per-pixel heads."""

    def __init__(self, cfg: GgcnnConfig | None = None, zero_heads: bool = False):
        self.cfg = cfg or GgcnnConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.params: dict[str, Param] = {}
        c_in = self.cfg.in_channels
        for i, (c, k) in enumerate(zip(self.cfg.channels, self.cfg.kernel_sizes)):
            self._add(f"enc{i}.weight", T.he_uniform((c, c_in, k, k), c_in * k * k, rng))
            self._add(f"enc{i}.bias", np.zeros(c))
            c_in = c
        # decoder mirrors the encoder: each layer undoes one strided conv
        dec_out = list(reversed(self.cfg.channels[:-1])) + [self.cfg.channels[0]]
        dec_k = list(reversed(self.cfg.kernel_sizes))
        for i, (c, k, s) in enumerate(zip(dec_out, dec_k, reversed(self.cfg.strides))):
            # a stride-s transposed conv feeds each output from about (k/s)^2 taps per channel
            fan_in = max(c_in * k * k // (s * s), 1)
            self._add(f"dec{i}.weight", T.he_uniform((c_in, c, k, k), fan_in, rng))
            self._add(f"dec{i}.bias", np.zeros(c))
            c_in = c
        for name in HEADS:
            w = np.zeros((1, c_in, 1, 1)) if zero_heads else T.he_uniform((1, c_in, 1, 1), c_in, rng)
            self._add(f"head.{name}.weight", w)
            self._add(f"head.{name}.bias", np.zeros(1))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Param(value, name)

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim not in (3, 4) or x.shape[-3] != self.cfg.in_channels:
            raise T.ShapeError(f"expected ({self.cfg.in_channels}, H, W) input, got shape {x.shape}")
        h, w = x.shape[-2:]
        s = self.cfg.total_stride
        if h % s or w % s or h < s or w < s:
            raise T.ShapeError(f"input size {h}x{w} must be a positive multiple of the total stride {s}")

    def trunk(self, x) -> tuple[Tensor, Tensor]:
        """Return (deepest encoder activation, decoder output)."""
        p = self.params
        h = x
        for i, (k, s) in enumerate(zip(self.cfg.kernel_sizes, self.cfg.strides)):
            h = T.relu(T.add_bias(T.conv2d(h, p[f"enc{i}.weight"], s, k // 2), p[f"enc{i}.bias"]))
        deepest = h
        for i, (k, s) in enumerate(zip(reversed(self.cfg.kernel_sizes), reversed(self.cfg.strides))):
            h = T.conv2d_transpose(h, p[f"dec{i}.weight"], s, k // 2, s - 1)
            h = T.relu(T.add_bias(h, p[f"dec{i}.bias"]))
        return deepest, h

    def encode(self, x) -> Tensor:
        """Deepest encoder plane only (what the concept layer pools)."""
        p = self.params
        h = x
        for i, (k, s) in enumerate(zip(self.cfg.kernel_sizes, self.cfg.strides)):
            h = T.relu(T.add_bias(T.conv2d(h, p[f"enc{i}.weight"], s, k // 2), p[f"enc{i}.bias"]))
        return h

    def heads(self, x) -> dict[str, Tensor]:
        """Differentiable head outputs, squashed into their valid ranges."""
        self.check_input(x.data if isinstance(x, Tensor) else np.asarray(x))
        x = x if isinstance(x, Tensor) else Tensor(x)
        _, h = self.trunk(x)
        p = self.params
        raw = {name: T.add_bias(T.conv2d(h, p[f"head.{name}.weight"]), p[f"head.{name}.bias"]) for name in HEADS}
        return {
            "quality": T.sigmoid(raw["quality"]),
            "cos2t": T.tanh(raw["cos2t"]),
            "sin2t": T.tanh(raw["sin2t"]),
            "width": T.scale(T.sigmoid(raw["width"]), self.cfg.width_max),
        }

    def forward(self, depth) -> GraspMaps:
        """Single pass over a normalized (C, H, W) input."""
        arr = depth.data if isinstance(depth, Tensor) else np.asarray(depth, dtype=float)
        if arr.ndim != 3:
            raise T.ShapeError(f"forward expects a (C, H, W) input, got shape {arr.shape}")
        out = self.heads(Tensor(arr))
        return GraspMaps(
            quality=np.clip(out["quality"].data[0], 0.0, 1.0),
            cos2t=np.clip(out["cos2t"].data[0], -1.0, 1.0),
            sin2t=np.clip(out["sin2t"].data[0], -1.0, 1.0),
            width=np.clip(out["width"].data[0], 0.0, self.cfg.width_max),
        )

    def predict(self, depth: np.ndarray, k: int = 1, smoothing_sigma: float | None = None, intensity=None):
        """Normalize a raw depth crop, run the network and decode ``k`` grasps."""
        x = prepare_input(depth, intensity, self.cfg.in_channels)
        sigma = self.cfg.smoothing_sigma if smoothing_sigma is None else smoothing_sigma
        maps = self.forward(x)
        return decode_grasps(maps, k, sigma), maps

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise T.CheckpointError(f"checkpoint lacks parameter {name}")
            if state[name].shape != p.shape:
                raise T.CheckpointError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.value = Tensor(state[name])
            p.zero_grad()

    def save(self, path, extra: dict[str, np.ndarray] | None = None, extra_config: str = "") -> None:
        state = self.state_dict()
        state.update(extra or {})
        T.save_checkpoint(path, state)
        Path(str(path) + ".cfg").write_text(self.cfg.to_text() + extra_config)

    @classmethod
    def load(cls, path) -> GraspNet:
        cfg = GgcnnConfig.from_text(Path(str(path) + ".cfg").read_text())
        net = cls(cfg)
        net.load_state_dict(T.load_checkpoint(path))
        return net


def prepare_input(depth: np.ndarray, intensity: np.ndarray | None = None, in_channels: int = 1) -> np.ndarray:
    planes = [normalize_depth(depth)]
    if in_channels == 2:
        if intensity is None:
            raise ConfigError("model expects an intensity channel")
        planes.append(np.asarray(intensity, dtype=float) * 2.0 - 1.0)
    elif in_channels != 1:
        raise ConfigError(f"unsupported in_channels={in_channels}")
    return np.stack(planes)


def grasp_loss(outputs: dict[str, Tensor], targets: GraspMaps | Sequence[GraspMaps], width_max: float) -> Tensor:
    """Quality MSE everywhere plus angle/width MSE on positive pixels."""
    if isinstance(targets, GraspMaps):
        targets = [targets]
    q = np.stack([t.quality for t in targets])[:, None]
    c = np.stack([t.cos2t for t in targets])[:, None]
    s = np.stack([t.sin2t for t in targets])[:, None]
    w = np.stack([t.width for t in targets])[:, None]
    q = q.reshape(outputs["quality"].shape)
    shape = q.shape
    mask = q > 0.5
    terms = [
        T.mse_loss(outputs["quality"], Tensor(q)),
        T.masked_mse(outputs["cos2t"], c.reshape(shape), mask),
        T.masked_mse(outputs["sin2t"], s.reshape(shape), mask),
        T.masked_mse(T.scale(outputs["width"], 1.0 / width_max), w.reshape(shape) / width_max, mask),
    ]
    return T.stack_sum(terms)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _transform_sample(x: np.ndarray, gts: Sequence[GraspRect], rot: int, flip: bool):
    """Rotate a (C, H, W) sample by ``rot`` quarter turns and optionally mirror it.

    Grasps are carried along exactly; square inputs keep their size.
    """
    h, w = x.shape[-2:]
    out = x
    grasps = list(gts)
    if flip:
        out = out[..., ::-1]
        grasps = [GraspRect(w - 1 - g.x, g.y, g.w, g.h, math.pi - g.theta) for g in grasps]
    for _ in range(rot):
        # np.rot90 on (row, col) axes turns the image counter-clockwise on screen:
        # new[r, c] = old[c, W-1-r]  ->  x' = y, y' = W-1-x
        ww = out.shape[-1]
        out = np.rot90(out, 1, axes=(-2, -1))
        grasps = [GraspRect(g.y, ww - 1 - g.x, g.w, g.h, g.theta - math.pi / 2) for g in grasps]
    return np.ascontiguousarray(out), grasps


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(dataset, cfg: GgcnnConfig | None = None, net: GraspNet | None = None) -> tuple[GraspNet, list[float]]:
    """Fit a grasp network on ``(depth, grasps)`` samples.

    ``depth`` is a raw (H, W) crop in scene units (or an already prepared
    (C, H, W) array); grasps are in the crop's pixel frame.  Returns the model
    and the mean loss of each epoch.
    """
    cfg = cfg or GgcnnConfig()
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    net = net or GraspNet(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    samples = []
    for depth, gts in dataset:
        arr = np.asarray(depth, dtype=float)
        x = arr if arr.ndim == 3 else prepare_input(arr, None, cfg.in_channels)
        net.check_input(x)
        if not np.all(np.isfinite(x)):
            raise T.GradientError("training sample contains non-finite values")
        samples.append((x, list(gts)))
    params = net.parameters()
    optimizer = make_optimizer(cfg, params)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            if cfg.augment:
                batch = [_transform_sample(x, g, int(rng.integers(4)), bool(rng.integers(2))) for x, g in batch]
            xs = np.stack([b[0] for b in batch])
            h, w = xs.shape[-2:]
            targets = [encode_targets(g, h, w) for _, g in batch]
            with T.Tape() as tape:
                loss = grasp_loss(net.heads(Tensor(xs)), targets, cfg.width_max)
                value = loss.item()
                if not math.isfinite(value):
                    raise T.GradientError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                tape.backward(loss)
            losses.append(value)
            optimizer.step()
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.5f", epoch, history[-1])
    return net, history


class SGD:
    """Plain (optionally momentum) SGD over a fixed parameter list."""

    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params, self.lr, self.momentum = list(params), lr, momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        if self.momentum:
            for p, v in zip(self.params, self.velocity):
                v *= self.momentum
                v += p.grad
                p.grad = v.copy()
        T.sgd_step(self.params, self.lr)


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = list(params), lr, betas, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.grad = m_hat / (np.sqrt(v_hat) + self.eps)
        T.sgd_step(self.params, self.lr)


def make_optimizer(cfg: GgcnnConfig, params):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum)
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr)
    raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
