"""The full model: overlapping patch embedding, class/position tokens,
pre-norm encoder stack, per-rotation branch layers, and BN-neck heads.

Parameters live in a flat name -> Tensor dict so the optimizer and the
checkpoint format can treat them uniformly.  Branch layout:

    enc0..enc{depth-1}   shared backbone layers
    orig                 the original-feature branch layer
    rot0..rot{n-1}       one independently initialized layer per rotation
    head0..head{n}       BN-neck heads (head0 = original branch)

Test-time features come exclusively from the original branch: backbone ->
orig layer -> class token -> batch norm (running stats).
"""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .errors import ConfigError, ShapeError
from .rotation import (AngleSet, average_rotated, grid_dims, make_rotated_set)
from .tensor import (DTYPES, Tensor, concat, gather_flat, gelu, layer_norm,
                     softmax)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_LAYER_FIELDS = (
    ("ln1.g", "ones"), ("ln1.b", "zeros"),
    ("wq", "proj"), ("bq", "zeros"), ("wk", "proj"), ("bk", "zeros"),
    ("wv", "proj"), ("bv", "zeros"), ("wo", "proj"), ("bo", "zeros"),
    ("ln2.g", "ones"), ("ln2.b", "zeros"),
    ("w1", "mlp_in"), ("b1", "zeros"), ("w2", "mlp_out"), ("b2", "zeros"),
)


def trunc_normal(rng: np.random.Generator, shape, std=0.02):
    """Normal(0, std) resampled until every draw lies within 2 std."""
    a = rng.normal(0.0, std, size=shape)
    bad = np.abs(a) > 2 * std
    while bad.any():
        a[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(a) > 2 * std
    return a


class BranchOutputs:
    """Class tokens after the branch layers."""

    def __init__(self, c_prime_o: Tensor, c_r: list):
        self.c_prime_o = c_prime_o
        self.c_r = c_r
        self.c_bar_r = average_rotated(c_r) if c_r else None


class RotReidModel:
    def __init__(self, cfg: TrainConfig, num_ids: int,
                 rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        self.num_ids = num_ids
        self.dtype = DTYPES[cfg.precision]
        b = cfg.backbone
        self.grid_x, self.grid_y = grid_dims(b.image_h, b.image_w,
                                             b.patch, b.stride)
        self.n_patches = self.grid_x * self.grid_y
        self.mlp_dim = int(round(b.dim * b.mlp_ratio))
        self.patch_idx = self._patch_index_map()
        self.params: dict[str, Tensor] = {}
        self.bn_state: dict[int, dict] = {}
        self.init_params(rng or np.random.default_rng(0))

    # ----- construction ----------------------------------------------------

    def _patch_index_map(self) -> np.ndarray:
        """Flat pixel indices of each patch window, row-major by grid cell."""
        b = self.cfg.backbone
        idx = np.empty((self.n_patches, b.patch * b.patch * b.channels),
                       dtype=np.int64)
        n = 0
        for gx in range(self.grid_x):
            for gy in range(self.grid_y):
                k = 0
                for i in range(b.patch):
                    for j in range(b.patch):
                        base = ((gx * b.stride + i) * b.image_w
                                + gy * b.stride + j) * b.channels
                        for c in range(b.channels):
                            idx[n, k] = base + c
                            k += 1
                n += 1
        return idx

    def branch_prefixes(self):
        return ["orig"] + [f"rot{i}" for i in range(self.cfg.rot.n_rotations)]

    def layer_prefixes(self):
        return ([f"enc{i}" for i in range(self.cfg.backbone.depth)]
                + self.branch_prefixes())

    def _param(self, name, arr):
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    def init_params(self, rng: np.random.Generator):
        b = self.cfg.backbone
        d, h = b.dim, self.mlp_dim
        self._param("patch.w",
                    trunc_normal(rng, (b.patch * b.patch * b.channels, d)))
        self._param("patch.b", np.zeros(d))
        self._param("cls", trunc_normal(rng, (1, d)))
        self._param("pos", trunc_normal(rng, (self.n_patches + 1, d)))
        for prefix in self.layer_prefixes():
            for field, kind in _LAYER_FIELDS:
                name = f"{prefix}.{field}"
                if kind == "ones":
                    self._param(name, np.ones(d))
                elif kind == "zeros":
                    size = {"b1": h}.get(field, d)
                    self._param(name, np.zeros(size))
                elif kind == "proj":
                    self._param(name, trunc_normal(rng, (d, d)))
                elif kind == "mlp_in":
                    self._param(name, trunc_normal(rng, (d, h)))
                elif kind == "mlp_out":
                    self._param(name, trunc_normal(rng, (h, d)))
        for k in range(self.cfg.rot.n_rotations + 1):
            self._param(f"head{k}.bn.g", np.ones(d))
            self._param(f"head{k}.bn.b", np.zeros(d))
            self._param(f"head{k}.w", trunc_normal(rng, (d, self.num_ids)))
            self.bn_state[k] = {"mean": np.zeros(d, dtype=self.dtype),
                                "var": np.ones(d, dtype=self.dtype)}

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    # ----- forward ---------------------------------------------------------

    def _mhsa(self, x: Tensor, p: str) -> Tensor:
        b = self.cfg.backbone
        bs, t, d = x.shape
        hd = d // b.heads

        def heads_of(w, bias):
            y = x @ self.params[f"{p}.{w}"] + self.params[f"{p}.{bias}"]
            return y.reshape(bs, t, b.heads, hd).transpose(0, 2, 1, 3)

        q = heads_of("wq", "bq")
        k = heads_of("wk", "bk")
        v = heads_of("wv", "bv")
        att = softmax((q @ k.swap_last()) * (1.0 / np.sqrt(hd)), axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(bs, t, d)
        return out @ self.params[f"{p}.wo"] + self.params[f"{p}.bo"]

    def encoder_layer(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        x = x + self._mhsa(h, prefix)
        h = layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        h = gelu(h @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        return x + (h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"])

    def embed(self, images: Tensor) -> Tensor:
        """(B,H,W,C) normalized pixels -> (B, N+1, D) input tokens."""
        b = self.cfg.backbone
        if images.shape[1:] != (b.image_h, b.image_w, b.channels):
            raise ShapeError(
                f"image batch {images.shape} does not match config "
                f"{(b.image_h, b.image_w, b.channels)}")
        bs = images.shape[0]
        flat = images.reshape(bs, b.image_h * b.image_w * b.channels)
        patches = gather_flat(flat, self.patch_idx)
        emb = patches @ self.params["patch.w"] + self.params["patch.b"]
        cls = self.params["cls"].broadcast_to((bs, 1, b.dim))
        tokens = concat([cls, emb], axis=1)
        return tokens + self.params["pos"]

    def backbone_forward(self, images: Tensor) -> Tensor:
        tokens = self.embed(images)
        for i in range(self.cfg.backbone.depth):
            tokens = self.encoder_layer(tokens, f"enc{i}")
        return tokens

    def _branch_token(self, tokens: Tensor, prefix: str) -> Tensor:
        # no trailing norm here: the branch example contract is that zeroed
        # sublayers leave the class token untouched; BN-neck normalizes later
        out = self.encoder_layer(tokens, prefix)
        return out[:, 0, :]

    def branch_forward(self, tokens: Tensor, angles: AngleSet) -> BranchOutputs:
        n = self.cfg.rot.n_rotations
        if len(angles.angles) != n:
            raise ConfigError(
                f"angle count {len(angles.angles)} != n_rotations {n}")
        c_prime_o = self._branch_token(tokens, "orig")
        c_r = []
        if n:
            members = make_rotated_set(tokens, self.grid_x, self.grid_y,
                                       angles)
            for i, m in enumerate(members):
                c_r.append(self._branch_token(m, f"rot{i}"))
        return BranchOutputs(c_prime_o, c_r)

    # ----- BN-neck ---------------------------------------------------------

    def bn_neck(self, k: int, feats: Tensor, training: bool) -> Tensor:
        g = self.params[f"head{k}.bn.g"]
        b = self.params[f"head{k}.bn.b"]
        st = self.bn_state[k]
        if training:
            mu = feats.mean(axis=0, keepdims=True)
            xc = feats - mu
            var = (xc * xc).mean(axis=0, keepdims=True)
            st["mean"] = ((1 - BN_MOMENTUM) * st["mean"]
                          + BN_MOMENTUM * mu.data.reshape(-1)).astype(self.dtype)
            st["var"] = ((1 - BN_MOMENTUM) * st["var"]
                         + BN_MOMENTUM * var.data.reshape(-1)).astype(self.dtype)
            return xc * ((var + BN_EPS) ** -0.5) * g + b
        xc = feats - Tensor(st["mean"])
        scale = Tensor(1.0 / np.sqrt(st["var"] + BN_EPS))
        return xc * scale * g + b

    def classify(self, k: int, post_bn: Tensor) -> Tensor:
        return post_bn @ self.params[f"head{k}.w"]

    # ----- inference -------------------------------------------------------

    def eval_features(self, images: Tensor) -> np.ndarray:
        """Post-BN original-branch class tokens, the retrieval feature."""
        tokens = self.backbone_forward(images)
        c = self._branch_token(tokens, "orig")
        return self.bn_neck(0, c, training=False).data
