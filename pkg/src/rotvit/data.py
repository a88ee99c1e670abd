"""Synthetic rotated-identity benchmark, manifest handling, PK sampling.

Each identity is a structured multi-blob color pattern on a flat,
non-identifying background.  Stored images are the prototype
under a random rotation (small angles for the train split, up to
test_rotation_max for query/gallery), scale jitter, additive noise and an
optional occluder.  Rotation is therefore the dominant train/test shift,
which is exactly the confound the benchmark isolates.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .config import SynthConfig
from .errors import DataError
from .ppm import read_ppm, write_ppm

MANIFEST_NAME = "manifest.csv"


@dataclass
class Record:
    path: str
    identity: int
    camera: int
    split: str


@dataclass
class Manifest:
    root: str
    records: list
    mean: np.ndarray
    std: np.ndarray

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def validate(self):
        train_ids = {r.identity for r in self.split("train")}
        q = self.split("query")
        g = self.split("gallery")
        test_ids = {r.identity for r in q} | {r.identity for r in g}
        if train_ids & test_ids:
            raise DataError(
                f"train/test identity overlap: {sorted(train_ids & test_ids)}")
        for r in q:
            ok = any(gr.identity == r.identity and gr.camera != r.camera
                     for gr in g)
            if not ok:
                raise DataError(
                    f"query identity {r.identity} has no cross-camera "
                    "gallery match")


# ----- image-space transforms ----------------------------------------------


def image_level_rotate(img: np.ndarray, theta_deg: float,
                       mode: str = "pad") -> np.ndarray:
    """Nearest-neighbor rotation about the image center.

    pad: same canvas, exposed corners zero-filled.
    crop: zoom to the largest inscribed axis-aligned window, so the output
    is fully covered but outer content is lost.
    """
    if not math.isfinite(theta_deg):
        raise DataError("rotation angle must be finite")
    h, w = img.shape[:2]
    t = math.radians(theta_deg)
    ct, st = math.cos(t), math.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = yy - cy, xx - cx
    if mode == "crop":
        s = 1.0 / (abs(ct) + abs(st))
        dy, dx = dy * s, dx * s
    elif mode != "pad":
        raise DataError(f"unknown rotation mode {mode!r}")
    sy = dy * ct + dx * st + cy
    sx = -dy * st + dx * ct + cx
    ry = np.rint(sy).astype(np.int64)
    rx = np.rint(sx).astype(np.int64)
    inside = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w)
    out = np.zeros_like(img)
    out[inside] = img[ry[inside], rx[inside]]
    return out


def _zoom(img: np.ndarray, s: float) -> np.ndarray:
    """Nearest-neighbor zoom about the center, same canvas."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy = np.rint((yy - cy) / s + cy).astype(np.int64)
    sx = np.rint((xx - cx) / s + cx).astype(np.int64)
    inside = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros_like(img)
    out[inside] = img[sy[inside], sx[inside]]
    return out


# ----- synthesis ------------------------------------------------------------


# every identity draws from the same palette with the same blob size, so
# color statistics carry no identity signal: only the spatial arrangement
# of the blobs distinguishes identities, and rotation scrambles exactly that.
# blobs are uniform disks larger than a patch window on a flat background:
# locally the image is piecewise-constant, so patch content barely changes
# under rotation and the shift is almost purely positional
_PALETTE = np.array([
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.90, 0.20, 0.90],
    [0.15, 0.85, 0.85],
])
_BLOB_RADIUS = 0.11
_RING_RADIUS = 0.30


def _identity_layout(rng: np.random.Generator, used_orders: set) -> np.ndarray:
    """Per-identity blob placement: (angle, radius fraction) per palette color.

    All blobs sit on one shared ring: a per-identity radius profile would
    be a rotation-invariant signature that lets a rotation-naive model
    re-identify rotated views by color-distance statistics alone.  On the
    ring, identity is the cyclic color order plus the angular gap
    pattern.  (Exactly uniform spacing was tried and removes too much:
    with the gap pattern gone, even rotation-augmented training cannot
    learn the pure order code at this scale and every variant sits at
    chance.)

    The cyclic order is globally unique per identity (tracked in
    ``used_orders``): two identities whose orders were rotations of each
    other would be indistinguishable under rotation invariance, which
    would punish the invariant model for the benchmark's own ambiguity.
    Six colors give 5! = 120 distinct cyclic orders.
    """
    k = len(_PALETTE)
    if len(used_orders) >= math.factorial(k - 1):
        raise DataError("more identities than distinct cyclic color orders")
    sector = 2 * np.pi / k
    while True:
        order = rng.permutation(k)
        seq = np.argsort(order)                 # colors in angular order
        start = int(np.argmax(seq == 0))
        key = tuple(int(v) for v in np.roll(seq, -start))
        if key not in used_orders:
            used_orders.add(key)
            break
    angles = order * sector + rng.uniform(0.3 * sector, 0.7 * sector, size=k)
    radii = np.full(k, _RING_RADIUS)
    return np.stack([angles, radii], axis=1)


def _render_prototype(layout: np.ndarray, size: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Draw the blob layout on a fresh (non-identifying) background."""
    img = np.full((size, size, 3), rng.uniform(0.33, 0.43))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    r = _BLOB_RADIUS * size
    for color, (ang, rad) in zip(_PALETTE, layout):
        by = size / 2 + rad * size * np.sin(ang)
        bx = size / 2 + rad * size * np.cos(ang)
        mask = (yy - by) ** 2 + (xx - bx) ** 2 <= r * r
        img[mask] = color
    return np.clip(img, 0.0, 1.0)


def _render_view(layout: np.ndarray, rot_max: float, spec: SynthConfig,
                 rng: np.random.Generator) -> np.ndarray:
    img = _render_prototype(layout, spec.image_size, rng)
    if spec.scale_jitter > 0:
        s = rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter)
        img = _zoom(img, s)
    theta = rng.uniform(-rot_max, rot_max)
    img = image_level_rotate(img, theta, mode="pad")
    if spec.occlusion_prob > 0 and rng.uniform() < spec.occlusion_prob:
        size = img.shape[0]
        oh = rng.integers(size // 8, size // 4)
        ow = rng.integers(size // 8, size // 4)
        oy = rng.integers(0, size - oh)
        ox = rng.integers(0, size - ow)
        img = img.copy()
        img[oy:oy + oh, ox:ox + ow] = rng.uniform(0.3, 0.7)
    if spec.background_noise_std > 0:
        img = img + rng.normal(0.0, spec.background_noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(spec: SynthConfig, out_dir) -> Manifest:
    """Write the dataset (P6 images + manifest) and return the manifest."""
    spec.validate()
    img_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {img_dir}: {e}") from e
    rng = np.random.default_rng(spec.seed)
    used_orders = set()
    records = []
    acc_sum = np.zeros(3)
    acc_sq = np.zeros(3)
    n_train_px = 0
    total_ids = spec.num_train_ids + spec.num_test_ids
    for ident in range(total_ids):
        layout = _identity_layout(rng, used_orders)
        is_train = ident < spec.num_train_ids
        rot_max = (spec.train_rotation_max if is_train
                   else spec.test_rotation_max)
        for j in range(spec.images_per_id):
            img = _render_view(layout, rot_max, spec, rng)
            rel = os.path.join("images", f"id{ident:04d}_img{j:02d}.ppm")
            write_ppm(os.path.join(out_dir, rel), img)
            if is_train:
                split, cam = "train", j % 2
                quant = np.round(img * 255.0) / 255.0
                acc_sum += quant.sum(axis=(0, 1))
                acc_sq += (quant ** 2).sum(axis=(0, 1))
                n_train_px += quant.shape[0] * quant.shape[1]
            elif j < spec.queries_per_id:
                split, cam = "query", 0
            else:
                split = "gallery"
                cam = 1 if (j - spec.queries_per_id) % 2 == 0 else 0
            records.append(Record(rel, ident, cam, split))
    mean = acc_sum / n_train_px
    var = acc_sq / n_train_px - mean ** 2
    std = np.sqrt(np.maximum(var, 1e-12))
    man = Manifest(out_dir, records, mean, std)
    man.validate()
    save_manifest(man)
    return man


# ----- manifest I/O ---------------------------------------------------------


def save_manifest(man: Manifest):
    path = os.path.join(man.root, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        m = ",".join(f"{v:.8f}" for v in man.mean)
        s = ",".join(f"{v:.8f}" for v in man.std)
        fh.write(f"# mean={m} std={s}\n")
        fh.write("path,identity,camera,split\n")
        for r in man.records:
            fh.write(f"{r.path},{r.identity},{r.camera},{r.split}\n")


def load_manifest(root) -> Manifest:
    path = os.path.join(root, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    mean = std = None
    records = []
    header_seen = False
    for ln, line in enumerate(lines, start=1):
        if line.startswith("#"):
            try:
                parts = dict(tok.split("=") for tok in line[1:].split())
                mean = np.array([float(v) for v in parts["mean"].split(",")])
                std = np.array([float(v) for v in parts["std"].split(",")])
            except (KeyError, ValueError) as e:
                raise DataError(f"{path}:{ln}: bad stats comment") from e
            continue
        if not line:
            continue
        if not header_seen:
            if line != "path,identity,camera,split":
                raise DataError(f"{path}:{ln}: unexpected header {line!r}")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path}:{ln}: expected 4 fields")
        try:
            records.append(Record(parts[0], int(parts[1]), int(parts[2]),
                                  parts[3]))
        except ValueError as e:
            raise DataError(f"{path}:{ln}: {e}") from e
    if mean is None or std is None:
        raise DataError(f"{path}: missing stats comment")
    man = Manifest(root, records, mean, std)
    man.validate()
    return man


# ----- loading and sampling -------------------------------------------------


class ImageStore:
    """In-memory cache of normalized images keyed by manifest record."""

    def __init__(self, man: Manifest):
        self.man = man
        self._cache = {}

    def raw(self, rec: Record) -> np.ndarray:
        if rec.path not in self._cache:
            self._cache[rec.path] = read_ppm(
                os.path.join(self.man.root, rec.path))
        return self._cache[rec.path]

    def normalize(self, img: np.ndarray) -> np.ndarray:
        return (img - self.man.mean) / self.man.std

    def batch(self, recs, augment=None) -> np.ndarray:
        """Stack normalized images; augment (if given) maps raw -> raw."""
        out = []
        for r in recs:
            img = self.raw(r)
            if augment is not None:
                img = augment(img)
            out.append(self.normalize(img))
        return np.stack(out)


def pk_epoch(train_records, p: int, k: int, rng: np.random.Generator):
    """One epoch of PK batches (lists of records), deterministic under rng.

    Identities are partitioned into groups of p without replacement (an
    incomplete trailing group is dropped); within an identity, k images
    are drawn without replacement.
    """
    by_id = {}
    for r in train_records:
        by_id.setdefault(r.identity, []).append(r)
    for ident, recs in by_id.items():
        if len(recs) < k:
            raise DataError(
                f"identity {ident} has {len(recs)} images, needs >= {k}")
    ids = sorted(by_id)
    if len(ids) < p:
        raise DataError(f"only {len(ids)} identities for p={p}")
    order = list(rng.permutation(ids))
    batches = []
    for gi in range(len(order) // p):
        group = order[gi * p:(gi + 1) * p]
        batch = []
        for ident in group:
            recs = by_id[ident]
            picks = rng.choice(len(recs), size=k, replace=False)
            batch.extend(recs[i] for i in picks)
        batches.append(batch)
    return batches
