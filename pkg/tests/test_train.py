import math
import os

import numpy as np
import pytest

from rotvit.checkpoint import (load_checkpoint, load_model, model_tensors,
                               restore_model, save_checkpoint)
from rotvit.config import SynthConfig, TrainConfig
from rotvit.data import synth_generate
from rotvit.errors import ConfigError, DataError, NumericError
from rotvit.model import RotReidModel
from rotvit.tensor import Tensor
from rotvit.train import EpochLog, SgdMomentum, Trainer, cosine_lr

RNG = np.random.default_rng(55)


def small_cfg(**kw):
    cfg = TrainConfig()
    cfg.epochs = 2
    cfg.p_ids = 2
    cfg.k_images = 2
    cfg.precision = "float32"
    cfg.backbone.image_h = cfg.backbone.image_w = 32
    cfg.backbone.patch = 8
    cfg.backbone.stride = 8
    cfg.backbone.dim = 8
    cfg.backbone.heads = 2
    cfg.backbone.depth = 1
    cfg.rot.n_rotations = 2
    cfg.data = SynthConfig(num_train_ids=4, num_test_ids=2, images_per_id=4,
                           image_size=32, queries_per_id=1, seed=0)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return synth_generate(small_cfg().data, root)


# ----- schedule -------------------------------------------------------------


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 0.4) == 0.4
    assert np.isclose(cosine_lr(100, 100, 0.4), 0.0, atol=1e-12)


def test_cosine_midpoint():
    assert np.isclose(cosine_lr(50, 100, 0.4), 0.2, atol=1e-12)


def test_cosine_warmup_linear():
    assert cosine_lr(0, 100, 0.4, warmup_steps=10) == 0.0
    assert np.isclose(cosine_lr(5, 100, 0.4, warmup_steps=10), 0.2)
    assert np.isclose(cosine_lr(10, 100, 0.4, warmup_steps=10), 0.4)


def test_cosine_monotone_after_warmup():
    vals = [cosine_lr(s, 200, 1.0, warmup_steps=20) for s in range(20, 201)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_cosine_step_out_of_range():
    with pytest.raises(ConfigError):
        cosine_lr(101, 100, 0.1)


# ----- optimizer ------------------------------------------------------------


def test_sgd_hand_iteration():
    # p=1, grad=p each step, lr=0.1, momentum 0.5, no decay:
    # v1=1, p1=0.9 ; v2=0.5*1+0.9=1.4, p2=0.9-0.14=0.76
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SgdMomentum({"p": p}, momentum=0.5, weight_decay=0.0)
    p.grad = p.data.copy()
    opt.step(0.1)
    assert np.isclose(p.data[0], 0.9)
    p.grad = p.data.copy()
    opt.step(0.1)
    assert np.isclose(p.data[0], 0.76)


def test_sgd_weight_decay_only():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = SgdMomentum({"p": p}, momentum=0.0, weight_decay=0.1)
    p.grad = np.zeros(1)
    opt.step(1.0)
    assert np.isclose(p.data[0], 2.0 - 0.1 * 2.0)


def test_sgd_none_grad_means_decay_only():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SgdMomentum({"p": p}, momentum=0.0, weight_decay=0.0)
    p.grad = None
    opt.step(1.0)
    assert p.data[0] == 1.0


# ----- loss log -------------------------------------------------------------


def test_epoch_log_csv_layout(tmp_path):
    log = EpochLog()
    log.add(1, 0.5, 0.25, 0.125, 0.875, 0.01)
    path = tmp_path / "loss_log.csv"
    log.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,l_ori,l_rot,l_inv,total,lr"
    assert lines[1] == "1,0.5,0.25,0.125,0.875,0.01"


# ----- trainer --------------------------------------------------------------


def test_trainer_smoke_and_outputs(tmp_path, tiny_dataset):
    cfg = small_cfg()
    out = tmp_path / "run"
    tr = Trainer(cfg, tiny_dataset, str(out))
    metrics = tr.run()
    assert metrics.num_valid_queries > 0
    assert len(tr.log.rows) == cfg.epochs
    for name in ("config.cfg", "loss_log.csv", "checkpoint.rtrx",
                 "metrics.csv"):
        assert (out / name).exists(), name
    # losses are finite and the lr column follows the cosine schedule
    for row in tr.log.rows:
        assert all(math.isfinite(v) for v in row[1:])


def test_trainer_deterministic(tiny_dataset):
    a = Trainer(small_cfg(), tiny_dataset)
    b = Trainer(small_cfg(), tiny_dataset)
    ma = a.run()
    mb = b.run()
    assert a.log.rows == b.log.rows
    assert np.array_equal(ma.cmc, mb.cmc)
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data,
                              b.model.params[k].data), k


def test_trainer_seed_changes_run(tiny_dataset):
    a = Trainer(small_cfg(seed=0), tiny_dataset)
    b = Trainer(small_cfg(seed=1), tiny_dataset)
    a.run()
    b.run()
    assert a.log.rows != b.log.rows


def test_trainer_no_rotation_branch(tiny_dataset):
    cfg = small_cfg()
    cfg.rot.n_rotations = 0
    cfg.loss.lambda_ = 1.0
    tr = Trainer(cfg, tiny_dataset)
    tr.run()
    # rotated-loss and constraint columns are identically zero
    assert all(r[2] == 0.0 and r[3] == 0.0 for r in tr.log.rows)


def test_trainer_fixed_angles_used(tiny_dataset):
    cfg = small_cfg()
    cfg.rot.fixed_angle_set = "7.0,-7.0"
    tr = Trainer(cfg, tiny_dataset)
    assert tr._angles().angles == [7.0, -7.0]
    assert tr._angles().angles == [7.0, -7.0]


def test_trainer_static_angles_stable(tiny_dataset):
    cfg = small_cfg()
    cfg.rot.resample_per_step = False
    tr = Trainer(cfg, tiny_dataset)
    assert tr._angles() is tr._angles()


def test_trainer_resampled_angles_vary(tiny_dataset):
    tr = Trainer(small_cfg(), tiny_dataset)
    assert tr._angles().angles != tr._angles().angles


def test_trainer_rejects_oversized_p(tiny_dataset):
    cfg = small_cfg()
    cfg.p_ids = 64
    with pytest.raises(DataError):
        Trainer(cfg, tiny_dataset)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_trainer_aborts_on_nonfinite_loss(tiny_dataset):
    cfg = small_cfg()
    tr = Trainer(cfg, tiny_dataset)
    tr.model.params["patch.w"].data[:] = np.nan
    with pytest.raises(NumericError):
        tr.run()


# ----- checkpoint -----------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path, tiny_dataset):
    cfg = small_cfg()
    tr = Trainer(cfg, tiny_dataset)
    tr.run()
    path = tmp_path / "ck.rtrx"
    tr.save(path)
    got_cfg, num_ids, epoch, rng_state, tensors = load_checkpoint(path)
    assert got_cfg == cfg
    assert num_ids == tr.model.num_ids
    assert epoch == cfg.epochs
    for name, t in tr.model.params.items():
        assert np.array_equal(tensors[name], t.data), name
    for name, v in tr.opt.velocity.items():
        assert np.array_equal(tensors[f"opt.{name}"],
                              v.astype(np.float32)), name
    assert rng_state["state"] == tr.data_rng.bit_generator.state["state"]


def test_checkpoint_magic_rejected(tmp_path):
    p = tmp_path / "bad.rtrx"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(DataError):
        load_checkpoint(p)


def test_load_model_reproduces_features(tmp_path, tiny_dataset):
    cfg = small_cfg()
    tr = Trainer(cfg, tiny_dataset)
    tr.run()
    path = tmp_path / "ck.rtrx"
    tr.save(path)
    model, epoch, _ = load_model(path)
    x = Tensor(RNG.normal(size=(2, 32, 32, 3)).astype(np.float32))
    a = tr.model.eval_features(Tensor(x.data.copy()))
    b = model.eval_features(Tensor(x.data.copy()))
    assert np.array_equal(a, b)
    assert epoch == cfg.epochs


def test_restore_model_shape_mismatch(tmp_path):
    cfg = small_cfg()
    m = RotReidModel(cfg, 4, np.random.default_rng(0))
    tensors = model_tensors(m)
    tensors["patch.w"] = tensors["patch.w"][:, :4]
    m2 = RotReidModel(cfg, 4, np.random.default_rng(1))
    with pytest.raises(DataError):
        restore_model(m2, tensors)


def test_restore_model_missing_required(tmp_path):
    cfg = small_cfg()
    m = RotReidModel(cfg, 4, np.random.default_rng(0))
    tensors = model_tensors(m)
    del tensors["orig.wq"]
    m2 = RotReidModel(cfg, 4, np.random.default_rng(1))
    with pytest.raises(DataError):
        restore_model(m2, tensors)


def test_restore_model_tolerates_missing_rot_branch(tmp_path):
    cfg = small_cfg()
    m = RotReidModel(cfg, 4, np.random.default_rng(0))
    tensors = {k: v for k, v in model_tensors(m).items()
               if not k.startswith(("rot", "head1", "head2",
                                    "state.head1", "state.head2"))}
    m2 = RotReidModel(cfg, 4, np.random.default_rng(1))
    restore_model(m2, tensors)
    x = Tensor(RNG.normal(size=(1, 32, 32, 3)).astype(np.float32))
    assert np.array_equal(m.eval_features(Tensor(x.data.copy())),
                          m2.eval_features(Tensor(x.data.copy())))


def test_checkpoint_float64_payload(tmp_path):
    cfg = small_cfg()
    cfg.precision = "float64"
    m = RotReidModel(cfg, 4, np.random.default_rng(0))
    path = tmp_path / "ck64.rtrx"
    save_checkpoint(path, cfg, 4, 0, {"state": 0}, model_tensors(m))
    _, _, _, _, tensors = load_checkpoint(path)
    assert tensors["patch.w"].dtype == np.float64
    assert np.array_equal(tensors["patch.w"], m.params["patch.w"].data)
