import numpy as np
import pytest

from rotvit.config import TrainConfig
from rotvit.errors import ConfigError, ShapeError
from rotvit.model import RotReidModel
from rotvit.rotation import AngleSet
from rotvit.tensor import Tensor

RNG = np.random.default_rng(31)


def make_model(n_rot=2, depth=1, dim=8, heads=2, size=16, patch=8, stride=4,
               num_ids=5, seed=3, precision="float64"):
    cfg = TrainConfig()
    cfg.precision = precision
    cfg.backbone.image_h = cfg.backbone.image_w = size
    cfg.backbone.patch = patch
    cfg.backbone.stride = stride
    cfg.backbone.dim = dim
    cfg.backbone.heads = heads
    cfg.backbone.depth = depth
    cfg.rot.n_rotations = n_rot
    return RotReidModel(cfg, num_ids, np.random.default_rng(seed))


def images(model, bs=2):
    b = model.cfg.backbone
    return Tensor(RNG.normal(size=(bs, b.image_h, b.image_w, b.channels)))


# ----- shapes ---------------------------------------------------------------


def test_token_count_at_reference_geometry():
    # 256x256 image, 16px patches at stride 12 -> 21x21 grid, 442 tokens
    cfg = TrainConfig()
    cfg.backbone.image_h = cfg.backbone.image_w = 256
    cfg.backbone.patch = 16
    cfg.backbone.stride = 12
    cfg.backbone.dim = 8
    cfg.backbone.heads = 2
    cfg.backbone.depth = 1
    cfg.rot.n_rotations = 0
    m = RotReidModel(cfg, 4, np.random.default_rng(0))
    assert (m.grid_x, m.grid_y) == (21, 21)
    assert m.params["pos"].shape == (442, 8)


def test_forward_shapes():
    m = make_model()
    toks = m.backbone_forward(images(m, bs=3))
    assert toks.shape == (3, m.n_patches + 1, 8)
    out = m.branch_forward(toks, AngleSet([5.0, -5.0], 15.0))
    assert out.c_prime_o.shape == (3, 8)
    assert len(out.c_r) == 2
    assert out.c_bar_r.shape == (3, 8)
    assert m.eval_features(images(m, bs=2)).shape == (2, 8)


def test_embed_rejects_wrong_image_shape():
    m = make_model()
    with pytest.raises(ShapeError):
        m.embed(Tensor(RNG.normal(size=(2, 8, 8, 3))))


def test_branch_forward_angle_count_mismatch():
    m = make_model(n_rot=2)
    toks = m.backbone_forward(images(m))
    with pytest.raises(ConfigError):
        m.branch_forward(toks, AngleSet([5.0], 15.0))


# ----- patch embedding ------------------------------------------------------


def test_patch_rows_of_zero_image_equal_bias():
    m = make_model()
    m.params["pos"].data[:] = 0.0
    toks = m.embed(Tensor(np.zeros((1, 16, 16, 3))))
    for p in range(1, m.n_patches + 1):
        assert np.allclose(toks.data[0, p], m.params["patch.b"].data)


def test_patch_embedding_locality():
    # changing a pixel outside a patch window leaves that token unchanged
    m = make_model()  # stride 4, patch 8: patch 0 covers rows/cols 0..7
    a = np.zeros((1, 16, 16, 3))
    b = a.copy()
    b[0, 15, 15, 0] = 1.0  # far corner, outside the first window
    ta = m.embed(Tensor(a)).data
    tb = m.embed(Tensor(b)).data
    assert np.allclose(ta[0, 1], tb[0, 1])
    assert not np.allclose(ta[0, m.n_patches], tb[0, m.n_patches])


def test_patch_index_map_row_major():
    m = make_model()
    b = m.cfg.backbone
    # patch (gx, gy) first pixel index is ((gx*stride)*W + gy*stride)*C
    for gx in range(m.grid_x):
        for gy in range(m.grid_y):
            n = gx * m.grid_y + gy
            want = ((gx * b.stride) * b.image_w + gy * b.stride) * b.channels
            assert m.patch_idx[n, 0] == want


# ----- identity behaviour of branch layers ----------------------------------


def zero_sublayers(m, prefix):
    for f in ("wo", "bo", "w2", "b2"):
        m.params[f"{prefix}.{f}"].data[:] = 0.0


def test_zeroed_branch_layers_pass_class_token_through():
    # with output projections zeroed, residual blocks are the identity, so
    # with zero rotation every branch token equals the backbone class token
    m = make_model(n_rot=2)
    for p in m.branch_prefixes():
        zero_sublayers(m, p)
    toks = m.backbone_forward(images(m, bs=2))
    out = m.branch_forward(toks, AngleSet([0.0, 0.0], 15.0))
    cls = toks.data[:, 0, :]
    assert np.allclose(out.c_prime_o.data, cls, atol=1e-10)
    for c in out.c_r:
        assert np.allclose(c.data, cls, atol=1e-10)
    assert np.allclose(out.c_bar_r.data, cls, atol=1e-10)


def test_rotated_branches_differ_without_zeroing():
    m = make_model(n_rot=2)
    toks = m.backbone_forward(images(m))
    out = m.branch_forward(toks, AngleSet([12.0, -12.0], 15.0))
    assert not np.allclose(out.c_r[0].data, out.c_r[1].data)


# ----- determinism and batching ---------------------------------------------


def test_init_deterministic_under_seed():
    a = make_model(seed=11)
    b = make_model(seed=11)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data), k
    c = make_model(seed=12)
    assert not np.array_equal(a.params["patch.w"].data,
                              c.params["patch.w"].data)


def test_forward_deterministic():
    m = make_model()
    x = images(m)
    a = m.eval_features(Tensor(x.data.copy()))
    b = m.eval_features(Tensor(x.data.copy()))
    assert np.array_equal(a, b)


def test_batch_items_independent():
    m = make_model()
    x = RNG.normal(size=(3, 16, 16, 3))
    full = m.eval_features(Tensor(x))
    solo = m.eval_features(Tensor(x[1:2]))
    assert np.allclose(full[1], solo[0], atol=1e-10)


def test_forward_finite():
    m = make_model(depth=2, n_rot=3)
    toks = m.backbone_forward(images(m, bs=4))
    out = m.branch_forward(toks, AngleSet([3.0, -7.0, 14.0], 15.0))
    for t in [out.c_prime_o, out.c_bar_r] + out.c_r:
        assert np.isfinite(t.data).all()


# ----- initialization statistics --------------------------------------------


def test_trunc_normal_bounds_and_scale():
    from rotvit.model import trunc_normal
    a = trunc_normal(np.random.default_rng(0), (20000,), std=0.02)
    assert np.abs(a).max() <= 0.04
    assert 0.015 < a.std() < 0.025


def test_param_count_analytic():
    m = make_model(n_rot=2, depth=1, dim=8, num_ids=5)
    d, h, n_tok = 8, 32, m.n_patches + 1
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
    n_layers = 1 + 1 + 2  # enc0, orig, rot0, rot1
    patch = 8 * 8 * 3 * d + d
    heads = 3 * (2 * d + d * 5)
    want = patch + d + n_tok * d + n_layers * per_layer + heads
    assert m.param_count() == want


# ----- BN-neck --------------------------------------------------------------


def test_bn_neck_training_standardizes():
    m = make_model()
    f = Tensor(RNG.normal(loc=3.0, scale=2.0, size=(64, 8)))
    out = m.bn_neck(0, f, training=True).data
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-7)
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-2)


def test_bn_neck_running_stats_converge():
    m = make_model()
    rng = np.random.default_rng(0)
    for _ in range(200):
        f = Tensor(rng.normal(loc=2.0, scale=3.0, size=(32, 8)))
        m.bn_neck(0, f, training=True)
    assert np.allclose(m.bn_state[0]["mean"], 2.0, atol=0.5)
    assert np.allclose(m.bn_state[0]["var"], 9.0, atol=2.0)
    # inference then approximately standardizes fresh draws
    f = rng.normal(loc=2.0, scale=3.0, size=(256, 8))
    out = m.bn_neck(0, Tensor(f), training=False).data
    assert np.abs(out.mean(axis=0)).max() < 0.5


def test_bn_neck_eval_does_not_touch_state():
    m = make_model()
    before = {k: v.copy() for k, v in m.bn_state[0].items()}
    m.bn_neck(0, Tensor(RNG.normal(size=(8, 8))), training=False)
    for k in before:
        assert np.array_equal(m.bn_state[0][k], before[k])


def test_classifier_has_no_bias_term():
    m = make_model()
    assert "head0.b" not in m.params
    zero = m.classify(0, Tensor(np.zeros((2, 8))))
    assert np.array_equal(zero.data, np.zeros((2, 5)))
