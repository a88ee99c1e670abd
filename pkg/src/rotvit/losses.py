"""Training objective: BN-neck cross-entropy, batch-hard triplet,
smooth-L1 invariance constraint, and their weighted combination.

The triplet term is the no-margin batch-hard form: per anchor, the
farthest positive and nearest negative (Euclidean), combined through
softplus so the term keeps a gradient even when the negative is already
further away.  A hinge-at-zero mode exists for ablation.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import (Tensor, log_softmax, smooth_l1, softplus, take_per_row)


def ce_bnneck(model, head: int, feats: Tensor, labels: np.ndarray,
              training: bool, label_smoothing: float = 0.0) -> Tensor:
    """Cross-entropy after the batch-norm neck of the given head."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= model.num_ids:
        raise DataError(
            f"label out of range [0, {model.num_ids}): "
            f"{labels.min()}..{labels.max()}")
    post = model.bn_neck(head, feats, training)
    logits = model.classify(head, post)
    lsm = log_softmax(logits, axis=-1)
    nll = -take_per_row(lsm, labels).mean()
    if label_smoothing > 0.0:
        uniform = -lsm.mean()
        nll = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    return nll


def pairwise_euclidean(feats: Tensor) -> Tensor:
    """Differentiable B x B Euclidean distance matrix."""
    sq = (feats * feats).sum(axis=1, keepdims=True)
    d2 = sq + sq.transpose(1, 0) - 2.0 * (feats @ feats.swap_last())
    return (d2.clamp_min(0.0) + 1e-12) ** 0.5


def triplet_batch_hard(feats: Tensor, labels: np.ndarray,
                       mode: str = "softplus") -> Tensor:
    labels = np.asarray(labels)
    if feats.shape[0] != len(labels):
        raise ShapeError("feature/label count mismatch")
    uniq, counts = np.unique(labels, return_counts=True)
    lonely = uniq[counts < 2]
    if lonely.size:
        raise DataError(
            f"identity {lonely[0]} has a single sample in the batch; "
            "batch-hard mining needs >= 2 per identity")
    if uniq.size < 2:
        raise DataError("batch-hard mining needs >= 2 identities")
    d = pairwise_euclidean(feats)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(labels), dtype=bool)
    dist = d.data
    hardest_pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    hardest_neg = np.where(~same, dist, np.inf).argmin(axis=1)
    d_ap = take_per_row(d, hardest_pos)
    d_an = take_per_row(d, hardest_neg)
    diff = d_ap - d_an
    if mode == "softplus":
        return softplus(diff).mean()
    if mode == "hinge0":
        return diff.clamp_min(0.0).mean()
    raise ConfigError(f"unknown triplet mode {mode!r}")


def invariance_loss(c_prime_o: Tensor, c_bar_r: Tensor) -> Tensor:
    """Smooth-L1 between the original token and the mean rotated token."""
    return smooth_l1(c_prime_o, c_bar_r)


def loss_ori(model, c_prime_o: Tensor, labels, training: bool,
             cfg) -> Tensor:
    return (triplet_batch_hard(c_prime_o, labels, cfg.triplet_mode)
            + ce_bnneck(model, 0, c_prime_o, labels, training,
                        cfg.label_smoothing))


def loss_rot(model, c_r: list, labels, training: bool, cfg) -> Tensor:
    n = len(c_r)
    if n == 0:
        raise ConfigError("loss_rot needs at least one rotated branch")
    if n != model.cfg.rot.n_rotations:
        raise ConfigError(
            f"branch count {n} != configured n_rotations "
            f"{model.cfg.rot.n_rotations}")
    acc = None
    for i, c in enumerate(c_r):
        term = (triplet_batch_hard(c, labels, cfg.triplet_mode)
                + ce_bnneck(model, i + 1, c, labels, training,
                            cfg.label_smoothing))
        acc = term if acc is None else acc + term
    return acc * (1.0 / n)


def loss_total(ori, rot, inv, lam: float, inv_weight: float = 1.0):
    """lam * L_ori + (1 - lam) * L_rot + inv_weight * L_inv.

    The constraint term is unweighted (inv_weight = 1) in the default
    objective; the coefficient exists for sensitivity runs only.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0,1], got {lam}")
    return lam * ori + (1.0 - lam) * rot + inv_weight * inv
