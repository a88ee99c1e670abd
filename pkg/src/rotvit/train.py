"""SGD training loop: cosine schedule, PK batching, loss logging,
checkpointing, and query/gallery evaluation of a trained model."""

from __future__ import annotations

import math
import os

import numpy as np

from .checkpoint import model_tensors, save_checkpoint
from .config import TrainConfig, config_to_text
from .data import ImageStore, Manifest, image_level_rotate, pk_epoch
from .errors import ConfigError, DataError, NumericError
from .evalmetrics import RankingMetrics, distance_matrix, evaluate
from .losses import invariance_loss, loss_ori, loss_rot, loss_total
from .model import RotReidModel
from .rotation import AngleSet, sample_angles
from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_steps: int = 0) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    denom = max(total_steps - warmup_steps, 1)
    t = (step - warmup_steps) / denom
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class SgdMomentum:
    """v <- m*v + g + wd*p ; p <- p - lr*v (classic momentum)."""

    def __init__(self, params: dict, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data)
                         for name, t in params.items()}

    def step(self, lr: float):
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[name]
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data = p.data - lr * v


class EpochLog:
    def __init__(self):
        self.rows = []   # (epoch, l_ori, l_rot, l_inv, total, lr)

    def add(self, *row):
        self.rows.append(tuple(row))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,l_ori,l_rot,l_inv,total,lr\n")
            for e, lo, lr_, li, tot, lr in self.rows:
                fh.write(f"{e},{lo:.9g},{lr_:.9g},{li:.9g},{tot:.9g},"
                         f"{lr:.9g}\n")


def extract_features(model: RotReidModel, store: ImageStore, records,
                     batch_size: int = 64) -> np.ndarray:
    feats = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        imgs = Tensor(store.batch(chunk).astype(model.dtype))
        feats.append(model.eval_features(imgs))
    return np.concatenate(feats, axis=0)


def evaluate_model(model: RotReidModel, man: Manifest,
                   store: ImageStore | None = None,
                   k_max: int = 10) -> RankingMetrics:
    store = store or ImageStore(man)
    q = man.split("query")
    g = man.split("gallery")
    qf = extract_features(model, store, q)
    gf = extract_features(model, store, g)
    dm = distance_matrix(qf, gf)
    return evaluate(dm,
                    [r.identity for r in q], [r.identity for r in g],
                    [r.camera for r in q], [r.camera for r in g],
                    k_max=k_max)


class Trainer:
    def __init__(self, cfg: TrainConfig, man: Manifest,
                 out_dir: str | None = None):
        cfg.validate()
        self.cfg = cfg
        self.man = man
        self.out_dir = out_dir
        self.store = ImageStore(man)
        ss = np.random.SeedSequence(cfg.seed)
        init_ss, data_ss, angle_ss, aug_ss = ss.spawn(4)
        self.data_rng = np.random.default_rng(data_ss)
        self.angle_rng = np.random.default_rng(angle_ss)
        self.aug_rng = np.random.default_rng(aug_ss)

        train = man.split("train")
        if not train:
            raise DataError("manifest has no train split")
        ids = sorted({r.identity for r in train})
        self.label_of = {ident: i for i, ident in enumerate(ids)}
        self.train_records = train
        self.model = RotReidModel(cfg, len(ids),
                                  np.random.default_rng(init_ss))
        self.opt = SgdMomentum(self.model.params, cfg.momentum,
                               cfg.weight_decay)
        self.steps_per_epoch = len(ids) // cfg.p_ids
        if self.steps_per_epoch == 0:
            raise DataError("p_ids exceeds the number of train identities")
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.warmup_steps = int(round(cfg.warmup_frac * self.total_steps))
        self.log = EpochLog()
        self.eval_history = []
        self._fixed_angles = cfg.rot.fixed_angles()
        self._static_angles = None
        if self._fixed_angles is None and not cfg.rot.resample_per_step:
            self._static_angles = sample_angles(cfg.rot.n_rotations,
                                                cfg.rot.alpha_degrees,
                                                self.angle_rng)

    def _angles(self) -> AngleSet:
        rot = self.cfg.rot
        if self._fixed_angles is not None:
            return AngleSet(list(self._fixed_angles), rot.alpha_degrees)
        if self._static_angles is not None:
            return self._static_angles
        return sample_angles(rot.n_rotations, rot.alpha_degrees,
                             self.angle_rng)

    def _augment(self, img: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.aug_rotation_max <= 0:
            return img
        theta = self.aug_rng.uniform(-cfg.aug_rotation_max,
                                     cfg.aug_rotation_max)
        return image_level_rotate(img, theta, mode=cfg.aug_rotation_mode)

    def _step(self, batch, step_idx: int) -> tuple:
        cfg = self.cfg
        imgs = self.store.batch(batch, augment=self._augment)
        images = Tensor(imgs.astype(self.model.dtype))
        labels = np.array([self.label_of[r.identity] for r in batch])
        tokens = self.model.backbone_forward(images)
        angles = self._angles()
        outs = self.model.branch_forward(tokens, angles)
        l_ori = loss_ori(self.model, outs.c_prime_o, labels, True, cfg.loss)
        if outs.c_r:
            l_rot = loss_rot(self.model, outs.c_r, labels, True, cfg.loss)
            l_inv = invariance_loss(outs.c_prime_o, outs.c_bar_r)
        else:
            l_rot = Tensor(np.zeros((), dtype=self.model.dtype))
            l_inv = Tensor(np.zeros((), dtype=self.model.dtype))
        total = loss_total(l_ori, l_rot, l_inv, cfg.loss.lambda_,
                           cfg.loss.invariance_weight)
        if not np.isfinite(total.data):
            raise NumericError(
                f"non-finite loss at step {step_idx} "
                f"(seed {cfg.seed}, batch ids "
                f"{sorted({r.identity for r in batch})})")
        self.model.zero_grads()
        total.backward()
        lr = cosine_lr(step_idx, self.total_steps, cfg.base_lr,
                       self.warmup_steps)
        self.opt.step(lr)
        return (float(l_ori.data), float(l_rot.data), float(l_inv.data),
                float(total.data), lr)

    def run(self) -> RankingMetrics | None:
        cfg = self.cfg
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(os.path.join(self.out_dir, "config.cfg"), "w",
                      encoding="utf-8", newline="\n") as fh:
                fh.write(config_to_text(cfg))
        step = 0
        metrics = None
        for epoch in range(1, cfg.epochs + 1):
            batches = pk_epoch(self.train_records, cfg.p_ids, cfg.k_images,
                               self.data_rng)
            sums = np.zeros(4)
            lr = 0.0
            for batch in batches:
                lo, lr_, li, tot, lr = self._step(batch, step)
                sums += (lo, lr_, li, tot)
                step += 1
            avg = sums / max(len(batches), 1)
            self.log.add(epoch, *avg, lr)
            if cfg.eval_every and epoch % cfg.eval_every == 0:
                metrics = evaluate_model(self.model, self.man, self.store)
                self.eval_history.append((epoch, metrics))
        metrics = evaluate_model(self.model, self.man, self.store)
        self.eval_history.append((cfg.epochs, metrics))
        if self.out_dir:
            self.log.to_csv(os.path.join(self.out_dir, "loss_log.csv"))
            self.save(os.path.join(self.out_dir, "checkpoint.rtrx"))
            from .evalmetrics import metrics_to_csv
            metrics_to_csv(metrics, os.path.join(self.out_dir, "metrics.csv"))
        return metrics

    def save(self, path):
        save_checkpoint(path, self.cfg, self.model.num_ids, self.cfg.epochs,
                        self.data_rng.bit_generator.state,
                        model_tensors(self.model, self.opt.velocity))
