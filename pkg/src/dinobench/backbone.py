"""Small cross-covariance image transformer and the projection head.

Attention is computed between feature channels rather than tokens: per head,
the query and key projections are L2-normalized along the token axis and their
``d_h x d_h`` cross-covariance, softmax-normalized, mixes the value channels.
Cost therefore grows linearly with the number of tokens.

Simplifications relative to the full published architecture: no local patch
interaction stage, no class-attention layers, and a linear patch embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor, op_stage

ParameterSet = dict  # name -> np.ndarray, insertion ordered


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    tau_init: float = 1.0
    in_chans: int = 3
    img_size: int = 32  # grid on which the learned position embedding lives
    head_hidden: int = 256
    head_bottleneck: int = 64
    out_dim: int = 256
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.img_size % self.patch_size:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if min(self.patch_size, self.embed_dim, self.depth, self.num_heads, self.out_dim) < 1:
            raise ConfigError("backbone extents must be positive")
        if self.in_chans not in (1, 3):
            raise ConfigError(f"in_chans must be 1 or 3, got {self.in_chans}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": BackboneConfig(),
    # published XCiT-S12/16 widths with the common DINO head sizes; not a test target
    "xcit_small": BackboneConfig(
        patch_size=16, embed_dim=384, depth=12, num_heads=8, img_size=224,
        head_hidden=2048, head_bottleneck=256, out_dim=65536,
    ),
}


def num_tokens(cfg: BackboneConfig, height: int, width: int) -> int:
    p = cfg.patch_size
    return 1 + (-(-height // p)) * (-(-width // p))


# -- parameters ----------------------------------------------------------------

def _trunc_normal(rng, shape, std):
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def init_params(cfg: BackboneConfig, rng, dtype=np.float32) -> ParameterSet:
    """Random initialization: truncated normal (std ``init_std``) weights, zero biases."""
    d, p, c = cfg.embed_dim, cfg.patch_size, cfg.in_chans
    grid = cfg.img_size // p
    std = cfg.init_std
    P: ParameterSet = {}

    def linear(name, fan_in, fan_out, bias=True):
        P[f"{name}.weight"] = _trunc_normal(rng, (fan_in, fan_out), std)
        if bias:
            P[f"{name}.bias"] = np.zeros(fan_out)

    def norm(name, width):
        P[f"{name}.weight"] = np.ones(width)
        P[f"{name}.bias"] = np.zeros(width)

    linear("backbone.patch_embed", p * p * c, d)
    P["backbone.cls_token"] = _trunc_normal(rng, (d,), std)
    P["backbone.pos_embed"] = _trunc_normal(rng, (1 + grid * grid, d), std)
    for i in range(cfg.depth):
        b = f"backbone.blocks.{i}"
        norm(f"{b}.norm1", d)
        linear(f"{b}.attn.qkv", d, 3 * d)
        P[f"{b}.attn.temperature"] = np.full(cfg.num_heads, cfg.tau_init)
        linear(f"{b}.attn.proj", d, d)
        norm(f"{b}.norm2", d)
        linear(f"{b}.mlp.fc1", d, cfg.mlp_hidden)
        linear(f"{b}.mlp.fc2", cfg.mlp_hidden, d)
    norm("backbone.norm", d)

    linear("head.fc1", d, cfg.head_hidden)
    linear("head.fc2", cfg.head_hidden, cfg.head_hidden)
    linear("head.fc3", cfg.head_hidden, cfg.head_bottleneck)
    linear("head.last", cfg.head_bottleneck, cfg.out_dim, bias=False)
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in P.items()}


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def subset(params: Mapping, prefix: str) -> dict:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def check_structure(params: Mapping[str, np.ndarray], reference: Mapping[str, np.ndarray]) -> None:
    """Raise :class:`ConfigError` naming the first parameter that differs in name or shape."""
    for name, ref in reference.items():
        if name not in params:
            raise ConfigError(f"parameter {name!r} missing")
        if tuple(np.shape(params[name])) != tuple(np.shape(ref)):
            raise ConfigError(
                f"parameter {name!r} has shape {tuple(np.shape(params[name]))}, expected {tuple(np.shape(ref))}"
            )
    extra = [k for k in params if k not in reference]
    if extra:
        raise ConfigError(f"unexpected parameter {extra[0]!r}")


def checksum(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# -- forward ---------------------------------------------------------------------

@lru_cache(maxsize=32)
def _pos_interp_matrix(src: int, dst_h: int, dst_w: int) -> np.ndarray:
    """Bilinear resampling matrix from a ``src x src`` grid to ``dst_h x dst_w``."""

    def axis_weights(n_src, n_dst):
        w = np.zeros((n_dst, n_src))
        pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1.0)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = pos - lo
        w[np.arange(n_dst), lo] += 1.0 - frac
        w[np.arange(n_dst), hi] += frac
        return w

    return np.kron(axis_weights(src, dst_h), axis_weights(src, dst_w))


def _patchify(images: np.ndarray, p: int) -> tuple[np.ndarray, int, int]:
    b, h, w, c = images.shape
    ph, pw = (-h) % p, (-w) % p
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="reflect")
        h, w = h + ph, w + pw
    gh, gw = h // p, w // p
    x = images.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, p * p * c), gh, gw


def _linear(x: Tensor, P: Mapping[str, Tensor], name: str) -> Tensor:
    y = T.matmul(x, P[f"{name}.weight"])
    bias = P.get(f"{name}.bias")
    return y + bias if bias is not None else y


def patch_embed(images, P: Mapping[str, Tensor], cfg: BackboneConfig) -> Tensor:
    """Tokens ``(batch, 1 + patches, d)``: class token then embedded patches."""
    imgs = np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.ndim != 4:
        raise ConfigError(f"expected (B, H, W, C) images, got shape {imgs.shape}")
    if imgs.shape[-1] != cfg.in_chans:
        raise ConfigError(f"images have {imgs.shape[-1]} channels, weights expect {cfg.in_chans}")
    dtype = P["backbone.patch_embed.weight"].dtype
    patches, gh, gw = _patchify(imgs.astype(dtype, copy=False), cfg.patch_size)
    x = _linear(Tensor(patches), P, "backbone.patch_embed")

    pos = P["backbone.pos_embed"]
    grid = cfg.img_size // cfg.patch_size
    if (gh, gw) != (grid, grid):
        interp = Tensor(_pos_interp_matrix(grid, gh, gw).astype(dtype))
        pos = T.concat([pos[:1], T.matmul(interp, pos[1:])], axis=0)
    b = imgs.shape[0]
    cls = T.reshape(P["backbone.cls_token"], (1, 1, cfg.embed_dim)) + Tensor(np.zeros((b, 1, 1), dtype=dtype))
    return T.concat([cls, x], axis=1) + pos


def xca_block(x: Tensor, P: Mapping[str, Tensor], cfg: BackboneConfig, index: int,
              attn_out: list | None = None) -> Tensor:
    """One cross-covariance attention block (pre-norm) followed by an MLP."""
    b, n, d = x.shape
    heads, dh = cfg.num_heads, cfg.head_dim
    pre = f"backbone.blocks.{index}"

    h = T.layer_norm(x, P[f"{pre}.norm1.weight"], P[f"{pre}.norm1.bias"])
    with op_stage("attention"):
        qkv = T.reshape(_linear(h, P, f"{pre}.attn.qkv"), (b, n, 3, heads, dh))
        # (B, H, dh, N): channels as rows, tokens along the last axis
        q = T.transpose(qkv[:, :, 0], (0, 2, 3, 1))
        k = T.transpose(qkv[:, :, 1], (0, 2, 3, 1))
        v = T.transpose(qkv[:, :, 2], (0, 2, 3, 1))
        q = T.l2_normalize(q, axis=-1)
        k = T.l2_normalize(k, axis=-1)
        logits = T.matmul(q, T.swapaxes(k, -1, -2))  # (B, H, dh, dh)
        tau = T.reshape(P[f"{pre}.attn.temperature"], (heads, 1, 1))
        attn = T.softmax_t(logits / tau, 1.0)
        if attn_out is not None:
            attn_out.append(attn.data)
        mixed = T.matmul(attn, v)  # each output channel is a convex mix of value channels
        mixed = T.reshape(T.transpose(mixed, (0, 3, 1, 2)), (b, n, d))
        x = x + _linear(mixed, P, f"{pre}.attn.proj")

    h = T.layer_norm(x, P[f"{pre}.norm2.weight"], P[f"{pre}.norm2.bias"])
    h = _linear(T.gelu(_linear(h, P, f"{pre}.mlp.fc1")), P, f"{pre}.mlp.fc2")
    x = x + h
    T.check_finite(x, f"block {index}")
    return x


def forward_tokens(images, P: Mapping[str, Tensor], cfg: BackboneConfig, attn_out=None) -> Tensor:
    x = patch_embed(images, P, cfg)
    for i in range(cfg.depth):
        x = xca_block(x, P, cfg, i, attn_out)
    return T.layer_norm(x, P["backbone.norm.weight"], P["backbone.norm.bias"])


def forward_backbone(images, P: Mapping[str, Tensor], cfg: BackboneConfig, attn_out=None) -> Tensor:
    """Class-token representation ``(batch, d)`` after the final norm."""
    if f"backbone.blocks.{cfg.depth - 1}.norm1.weight" not in P or f"backbone.blocks.{cfg.depth}.norm1.weight" in P:
        raise ConfigError(f"parameter set does not have {cfg.depth} blocks")
    if P["backbone.patch_embed.weight"].shape != (cfg.patch_size ** 2 * cfg.in_chans, cfg.embed_dim):
        raise ConfigError(
            f"patch_embed weight shape {P['backbone.patch_embed.weight'].shape} does not match config"
        )
    tokens = forward_tokens(images, P, cfg, attn_out)
    return tokens[:, 0]


def projection_head(features: Tensor, P: Mapping[str, Tensor], cfg: BackboneConfig) -> Tensor:
    """Four fully connected layers to ``out_dim`` prototype logits.

    GELU follows the first two layers; the bottleneck output is L2-normalized
    before the last (bias-free) layer.
    """
    if features.shape[-1] != P["head.fc1.weight"].shape[0]:
        raise ConfigError(f"head expects width {P['head.fc1.weight'].shape[0]}, got {features.shape[-1]}")
    h = T.gelu(_linear(features, P, "head.fc1"))
    h = T.gelu(_linear(h, P, "head.fc2"))
    h = _linear(h, P, "head.fc3")
    h = T.l2_normalize(h, axis=-1)
    return _linear(h, P, "head.last")


HEAD_LAYERS = ("head.fc1", "head.fc2", "head.fc3", "head.last")


def embed(images, params: Mapping[str, np.ndarray], cfg: BackboneConfig, batch_size: int = 256) -> np.ndarray:
    """Inference helper: backbone features for a stack of images, no graph recorded."""
    P = as_leaves(params)
    imgs = np.asarray(images)
    rows = []
    with T.no_grad():
        for start in range(0, len(imgs), batch_size):
            rows.append(forward_backbone(imgs[start:start + batch_size], P, cfg).data)
    if not rows:
        return np.zeros((0, cfg.embed_dim), dtype=params["backbone.norm.weight"].dtype)
    return np.concatenate(rows, axis=0)
