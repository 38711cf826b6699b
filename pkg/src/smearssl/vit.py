"""Small Vision Transformer producing one CLS embedding per image view.

Parameters live in a flat ``{name: Tensor}`` dict so the trainer, the EMA
teacher update, and the checkpoint writer all see the same handles. Patch
tokens stay reachable for the PCA feature-map path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    in_channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ParameterError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ParameterError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        for field in ("image_size", "patch_size", "embed_dim", "depth", "heads", "in_channels"):
            if getattr(self, field) < 1:
                raise ParameterError(f"{field} must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def vit_param_count(cfg: VitConfig) -> int:
    """Closed-form parameter count for an encoder built from ``cfg``."""
    d = cfg.embed_dim
    h = cfg.mlp_hidden
    stem = cfg.patch_size**2 * cfg.in_channels * d + d
    pos = (cfg.num_patches + 1) * d
    cls = d
    block = (
        2 * d  # ln1
        + d * 3 * d + 3 * d  # fused qkv
        + d * d + d  # attention output projection
        + 2 * d  # ln2
        + d * h + h + h * d + d  # mlp
    )
    return stem + pos + cls + cfg.depth * block + 2 * d


def reference_size_configs() -> dict[str, VitConfig]:
    """The three published model sizes (224 px, patch 14, mlp ratio 4).

    Used only for parameter-count arithmetic; never instantiated here.
    """
    return {
        "small": VitConfig(224, 14, 384, 12, 6, 4.0),
        "base": VitConfig(224, 14, 768, 12, 12, 4.0),
        "large": VitConfig(224, 14, 1024, 24, 16, 4.0),
    }


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """N(0, std^2) samples rejected outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def images_to_patches(images: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """[B,H,W,C] float array -> [B, N, patch*patch*C] row-major patch rows."""
    b, h, w, c = images.shape
    if h != cfg.image_size or w != cfg.image_size:
        raise DimensionError(
            f"expected {cfg.image_size}x{cfg.image_size} images, got {h}x{w}"
        )
    if c != cfg.in_channels:
        raise DimensionError(f"expected {cfg.in_channels} channels, got {c}")
    p, g = cfg.patch_size, cfg.grid
    x = images.reshape(b, g, p, g, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, p * p * c))


def vit_param_names(cfg: VitConfig) -> list[str]:
    names = ["patch_proj.weight", "patch_proj.bias", "pos_embed", "cls_token"]
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        names += [pre + n for n in (
            "ln1.gain", "ln1.bias", "attn.qkv.weight", "attn.qkv.bias",
            "attn.proj.weight", "attn.proj.bias", "ln2.gain", "ln2.bias",
            "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias")]
    names += ["final_ln.gain", "final_ln.bias"]
    return names


def init_vit_params(cfg: VitConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, T.Tensor]:
    """Fresh parameter dict: truncated normal (std 0.02) projections, zero
    biases, unit layernorm gains, CLS ~ N(0, 0.02^2)."""
    d = cfg.embed_dim
    params: dict[str, np.ndarray] = {}
    params["patch_proj.weight"] = truncated_normal(rng, (cfg.patch_size**2 * cfg.in_channels, d))
    params["patch_proj.bias"] = np.zeros(d, dtype=np.float32)
    params["pos_embed"] = truncated_normal(rng, (cfg.num_patches + 1, d))
    params["cls_token"] = rng.normal(0.0, 0.02, size=d).astype(np.float32)
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        params[pre + "ln1.gain"] = np.ones(d, dtype=np.float32)
        params[pre + "ln1.bias"] = np.zeros(d, dtype=np.float32)
        params[pre + "attn.qkv.weight"] = truncated_normal(rng, (d, 3 * d))
        params[pre + "attn.qkv.bias"] = np.zeros(3 * d, dtype=np.float32)
        params[pre + "attn.proj.weight"] = truncated_normal(rng, (d, d))
        params[pre + "attn.proj.bias"] = np.zeros(d, dtype=np.float32)
        params[pre + "ln2.gain"] = np.ones(d, dtype=np.float32)
        params[pre + "ln2.bias"] = np.zeros(d, dtype=np.float32)
        params[pre + "mlp.fc1.weight"] = truncated_normal(rng, (d, cfg.mlp_hidden))
        params[pre + "mlp.fc1.bias"] = np.zeros(cfg.mlp_hidden, dtype=np.float32)
        params[pre + "mlp.fc2.weight"] = truncated_normal(rng, (cfg.mlp_hidden, d))
        params[pre + "mlp.fc2.bias"] = np.zeros(d, dtype=np.float32)
    params["final_ln.gain"] = np.ones(d, dtype=np.float32)
    params["final_ln.bias"] = np.zeros(d, dtype=np.float32)
    return {k: T.Tensor(v.astype(dtype), requires_grad=True) for k, v in params.items()}


def attention(tokens: T.Tensor, qkv_w: T.Tensor, qkv_b: T.Tensor,
              proj_w: T.Tensor, proj_b: T.Tensor, heads: int) -> T.Tensor:
    """Multi-head self-attention over [B, T, D] tokens."""
    b, t, d = tokens.shape
    if d % heads != 0:
        raise DimensionError(f"token dim {d} not divisible by heads {heads}")
    dh = d // heads
    qkv = T.matmul(tokens, qkv_w) + qkv_b  # [B,T,3D]
    qkv = T.reshape(qkv, (b, t, 3, heads, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # [3,B,h,T,dh]
    q = T.reshape(T.narrow(qkv, 0, 0, 1), (b, heads, t, dh))
    k = T.reshape(T.narrow(qkv, 0, 1, 1), (b, heads, t, dh))
    v = T.reshape(T.narrow(qkv, 0, 2, 1), (b, heads, t, dh))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # [B,h,T,dh]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return T.matmul(ctx, proj_w) + proj_b


class VitEncoder:
    """Pre-norm ViT; forward returns the CLS embedding after the final
    layernorm, with patch tokens exposed for the feature-map path."""

    LN_EPS = 1e-6

    def __init__(self, cfg: VitConfig, seed: int = 0, params: dict[str, T.Tensor] | None = None,
                 dtype=np.float32):
        self.cfg = cfg
        if params is None:
            params = init_vit_params(cfg, np.random.Generator(np.random.PCG64(seed)), dtype=dtype)
        self.params = params

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    def forward_tokens(self, images: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
        """Returns (cls [B,D], patch tokens [B,N,D]) after the final layernorm."""
        cfg, p = self.cfg, self.params
        patches = images_to_patches(np.asarray(images), cfg)
        x = T.Tensor(patches.astype(p["patch_proj.weight"].dtype, copy=False))
        x = T.matmul(x, p["patch_proj.weight"]) + p["patch_proj.bias"]  # [B,N,D]
        b = x.shape[0]
        cls = T.reshape(p["cls_token"], (1, cfg.embed_dim))
        cls_rows = T.concat([cls] * b, axis=0)  # [B,D]
        cls_tok = T.reshape(cls_rows, (b, 1, cfg.embed_dim))
        x = T.concat([cls_tok, x], axis=1)  # [B,1+N,D]
        x = x + p["pos_embed"]
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            h = T.layernorm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"], self.LN_EPS)
            x = x + attention(h, p[pre + "attn.qkv.weight"], p[pre + "attn.qkv.bias"],
                              p[pre + "attn.proj.weight"], p[pre + "attn.proj.bias"], cfg.heads)
            h = T.layernorm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"], self.LN_EPS)
            h = T.matmul(h, p[pre + "mlp.fc1.weight"]) + p[pre + "mlp.fc1.bias"]
            h = T.gelu(h)
            h = T.matmul(h, p[pre + "mlp.fc2.weight"]) + p[pre + "mlp.fc2.bias"]
            x = x + h
            x.check_finite(f"encoder block {i} output")
        x = T.layernorm(x, p["final_ln.gain"], p["final_ln.bias"], self.LN_EPS)
        x.check_finite("final layernorm output")
        t = 1 + cfg.num_patches
        cls_out = T.reshape(T.narrow(x, 1, 0, 1), (b, cfg.embed_dim))
        patch_out = T.narrow(x, 1, 1, t - 1)
        return cls_out, patch_out

    def forward(self, images: np.ndarray) -> T.Tensor:
        cls_out, _ = self.forward_tokens(images)
        return cls_out
