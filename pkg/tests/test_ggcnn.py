import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toolgrasp import tensor as T
from toolgrasp.geometry import GraspRect, angle_diff, grasp_match, match_any
from toolgrasp.ggcnn import (
    ConfigError,
    GgcnnConfig,
    GraspMaps,
    GraspNet,
    _transform_sample,
    decode_grasps,
    encode_targets,
    grasp_loss,
    normalize_depth,
    prepare_input,
    train,
)
from toolgrasp.tensor import Tensor

from oracles import argmax_oracle

TINY = dict(channels=(2, 3, 4), kernel_sizes=(3, 3, 3))


def random_maps(rng, h=16, w=16):
    return GraspMaps(
        quality=rng.uniform(size=(h, w)),
        cos2t=rng.uniform(-1, 1, size=(h, w)),
        sin2t=rng.uniform(-1, 1, size=(h, w)),
        width=rng.uniform(1, 30, size=(h, w)),
    )


# targets and decoding ----------------------------------------------------------

def test_encode_single_grasp_round_trip():
    g = GraspRect(20.0, 14.0, 18.0, 9.0, 0.6)
    maps = encode_targets([g], 32, 40)
    assert maps.quality.shape == (32, 40)
    assert maps.quality[14, 20] == 1.0
    assert maps.quality.sum() > 1
    (d, score), = decode_grasps(maps, 1, 0.0)
    assert score == 1.0
    assert grasp_match(d, g, 0.25, 1e-6)
    assert angle_diff(d.theta, g.theta) <= 1e-6


def test_encode_later_grasp_wins():
    a = GraspRect(10, 10, 12, 6, 0.0)
    b = GraspRect(10, 10, 12, 6, 1.0)
    maps = encode_targets([a, b], 20, 20)
    assert maps.cos2t[10, 10] == pytest.approx(math.cos(2.0))
    assert maps.width[10, 10] == 12


def test_encode_tiny_grasp_marks_centre():
    maps = encode_targets([GraspRect(5.4, 6.6, 1.0, 0.5, 0.0)], 10, 10)
    assert maps.quality.sum() == 1 and maps.quality[7, 5] == 1


def test_decode_orders_by_score_then_row_major():
    q = np.zeros((8, 8))
    q[5, 1] = q[2, 6] = q[2, 2] = 0.9
    q[7, 7] = 0.95
    maps = GraspMaps(q, np.ones_like(q), np.zeros_like(q), np.full_like(q, 10.0))
    out = decode_grasps(maps, 4, 0.0)
    assert [(g.y, g.x) for g, _ in out] == [(7, 7), (2, 2), (2, 6), (5, 1)]
    assert all(g.h == g.w / 2 for g, _ in out)


def test_decode_width_floor_and_bad_k():
    maps = GraspMaps(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4)), np.zeros((4, 4)))
    (g, _), = decode_grasps(maps, 1, 0.0)
    assert g.w == 1.0
    with pytest.raises(ValueError):
        decode_grasps(maps, 0)


@pytest.mark.parametrize("seed", range(20))
def test_decode_matches_argmax_oracle(seed):
    maps = random_maps(np.random.default_rng(seed))
    (g, score), = decode_grasps(maps, 1, 0.0)
    r, c = argmax_oracle(maps.quality)
    assert (g.y, g.x) == (r, c)
    assert score == maps.quality[r, c]


@given(st.floats(-math.pi / 2, math.pi / 2 - 1e-9))
def test_angle_round_trip(theta):
    back = 0.5 * math.atan2(math.sin(2 * theta), math.cos(2 * theta))
    assert abs(back - theta) < 1e-9 or abs(abs(back - theta) - math.pi) < 1e-9


# normalization ---------------------------------------------------------------

def test_normalize_depth():
    d = np.full((4, 4), 0.7)
    d[0, 0] = 0.5
    d[0, 1] = 0.75
    n = normalize_depth(d)
    assert n[1, 1] == 0.0
    assert n[0, 0] == -1.0
    assert n[0, 1] == pytest.approx(0.05 / 0.15)
    assert np.allclose(normalize_depth(d + 3.0), n, atol=1e-12)
    with pytest.raises(ValueError):
        normalize_depth(np.array([[np.nan]]))


# network -------------------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4))
def test_forward_shape_matches_input(a, b):
    net = GraspNet(GgcnnConfig(**TINY))
    x = np.random.default_rng(a * 7 + b).normal(size=(1, 8 * a, 8 * b))
    maps = net.forward(x)
    assert maps.shape == (8 * a, 8 * b)
    assert maps.quality.min() >= 0 and maps.quality.max() <= 1
    assert maps.width.min() >= 0 and maps.width.max() <= net.cfg.width_max


def test_forward_rejects_bad_shapes():
    net = GraspNet(GgcnnConfig(**TINY))
    with pytest.raises(T.ShapeError):
        net.forward(np.zeros((1, 12, 16)))
    with pytest.raises(T.ShapeError):
        net.forward(np.zeros((2, 16, 16)))
    with pytest.raises(T.ShapeError):
        net.forward(np.zeros((16, 16)))


def test_config_validation_and_text_round_trip():
    with pytest.raises(ConfigError):
        GgcnnConfig(kernel_sizes=(4, 5, 5))
    with pytest.raises(ConfigError):
        GgcnnConfig(channels=(8, 16))
    cfg = GgcnnConfig(lr=0.125, channels=(4, 6, 8), augment=False)
    assert GgcnnConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        GgcnnConfig.from_text("lr=fast\n")


def test_full_loss_gradient_32px():
    rng = np.random.default_rng(5)
    net = GraspNet(GgcnnConfig(seed=5, **TINY))
    # zero biases put dead ReLU units exactly on the kink; nudge them off it
    for name, p in net.params.items():
        if name.endswith("bias"):
            p.value = Tensor(rng.uniform(0.05, 0.1, size=p.shape))
    x = Tensor(rng.normal(size=(1, 32, 32)) * 0.5)
    targets = encode_targets([GraspRect(16, 15, 12, 6, 0.4), GraspRect(9, 22, 10, 5, -1.0)], 32, 32)
    err = T.finite_diff_check(lambda: grasp_loss(net.heads(x), targets, net.cfg.width_max), net.parameters())
    assert err < 1e-4


def test_checkpoint_round_trip(tmp_path):
    net = GraspNet(GgcnnConfig(seed=3, **TINY))
    path = tmp_path / "net.glt"
    net.save(path)
    back = GraspNet.load(path)
    assert back.cfg == net.cfg
    x = np.random.default_rng(0).normal(size=(1, 16, 16))
    a, b = net.forward(x), back.forward(x)
    assert np.array_equal(a.quality, b.quality) and np.array_equal(a.width, b.width)


def test_prepare_input_channels():
    d = np.full((8, 8), 0.7)
    assert prepare_input(d).shape == (1, 8, 8)
    assert prepare_input(d, np.zeros((8, 8)), 2).shape == (2, 8, 8)
    with pytest.raises(ConfigError):
        prepare_input(d, None, 2)


# augmentation -------------------------------------------------------------------

@pytest.mark.parametrize("rot,flip", [(1, False), (2, False), (3, True), (0, True)])
def test_transform_carries_grasps(rot, flip):
    h = w = 24
    g = GraspRect(7.0, 15.0, 8.0, 4.0, 0.3)
    x = encode_targets([g], h, w).quality[None]
    xt, (gt,) = _transform_sample(x, [g], rot, flip)
    moved = encode_targets([gt], h, w).quality
    assert np.array_equal(xt[0], moved)


# training -------------------------------------------------------------------------

def _toy_sample():
    depth = np.full((16, 16), 0.7)
    depth[6:10, 2:14] = 0.6
    return depth, [GraspRect(8.0, 8.0, 10.0, 5.0, math.pi / 2 - 1e-3)]


def test_train_lr_zero_leaves_params():
    cfg = GgcnnConfig(lr=0.0, epochs=2, seed=1, **TINY)
    net = GraspNet(cfg)
    before = {k: v.copy() for k, v in net.state_dict().items()}
    train([_toy_sample()], cfg, net)
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_train_deterministic():
    cfg = GgcnnConfig(lr=0.01, epochs=3, seed=2, optimizer="adam", **TINY)
    _, h1 = train([_toy_sample()] * 3, cfg)
    _, h2 = train([_toy_sample()] * 3, cfg)
    assert h1 == h2


def test_train_rejects_empty_and_non_finite():
    with pytest.raises(ValueError):
        train([], GgcnnConfig(**TINY))
    _, gts = _toy_sample()
    with pytest.raises(T.GradientError):
        train([(np.full((1, 16, 16), np.nan), gts)], GgcnnConfig(epochs=1, **TINY))


@pytest.mark.slow
def test_single_sample_overfit():
    depth, gts = _toy_sample()
    cfg = GgcnnConfig(channels=(8, 16, 32), optimizer="adam", lr=0.01, epochs=300, augment=False, seed=0)
    net, history = train([(depth, gts)], cfg)
    assert history[-1] < 0.01
    (g, _), = net.predict(depth, 1)[0]
    assert match_any(g, gts)
