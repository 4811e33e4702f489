"""A small vision transformer assembled from the tensor op set.

Pre-LN encoder blocks (norm, attention, residual; norm, mlp with gelu,
residual), a learned class token and positional embedding, a final layer
norm over the class position, and a linear head. No dropout or stochastic
depth anywhere: forward passes are deterministic functions of the weights.

``build_model`` produces a plain untied model. The tied variant (several
positions sharing one parameter set) is built by ``sharing.build_aux`` on
top of the same internals here.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    patch_size: int
    channels: int
    depth: int
    width: int
    heads: int
    classes: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "depth", "width", "heads", "classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.mlp_dim < 1:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} gives an empty hidden layer")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerParams:
    """One encoder block's tensors."""

    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    out_w: Tensor
    out_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    up_w: Tensor
    up_b: Tensor
    down_w: Tensor
    down_b: Tensor

    FIELDS = ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "out_w", "out_b",
              "ln2_g", "ln2_b", "up_w", "up_b", "down_w", "down_b")

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.FIELDS:
            yield name, getattr(self, name)

    def clone(self) -> "LayerParams":
        return LayerParams(**{n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.named()})


@dataclass
class ModelParams:
    """All weights of one model, plus an optional tying plan.

    ``layers`` holds one LayerParams per position; a tied model repeats the
    same object at every position of a stage, and ``plan`` records which
    positions alias (see sharing.StagePlan). Untied models have plan None.
    """

    cfg: ModelConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    layers: list[LayerParams]
    final_ln_g: Tensor
    final_ln_b: Tensor
    head_w: Tensor
    head_b: Tensor
    plan: "object | None" = None  # sharing.StagePlan when tied

    SHARED_FIELDS = ("patch_w", "patch_b", "cls_token", "pos_embed",
                     "final_ln_g", "final_ln_b", "head_w", "head_b")

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """All tensors by position; aliased objects appear once per position."""
        for name in self.SHARED_FIELDS:
            yield name, getattr(self, name)
        for i, layer in enumerate(self.layers):
            for name, t in layer.named():
                yield f"layer{i:02d}.{name}", t

    def unique_tensors(self) -> list[tuple[str, Tensor]]:
        """Tensors deduplicated by object identity, first name wins."""
        seen: set[int] = set()
        out = []
        for name, t in self.named_tensors():
            if id(t) in seen:
                continue
            seen.add(id(t))
            out.append((name, t))
        return out


def count_params(params: ModelParams, unique_only: bool = True) -> int:
    """Total scalar count; unique_only counts aliased storage once."""
    items = params.unique_tensors() if unique_only else list(params.named_tensors())
    return sum(t.data.size for _, t in items)


# ---- construction -------------------------------------------------------------


def _init_layer(cfg: ModelConfig, rng: SplitMix64, dtype) -> LayerParams:
    d, m3, hid = cfg.width, 3 * cfg.width, cfg.mlp_dim

    def w(shape):
        return Tensor(rng.truncated_normal(shape, std=INIT_STD).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    return LayerParams(
        ln1_g=ones((d,)), ln1_b=zeros((d,)),
        qkv_w=w((d, m3)), qkv_b=zeros((m3,)),
        out_w=w((d, d)), out_b=zeros((d,)),
        ln2_g=ones((d,)), ln2_b=zeros((d,)),
        up_w=w((d, hid)), up_b=zeros((hid,)),
        down_w=w((hid, d)), down_b=zeros((d,)),
    )


def build_params(cfg: ModelConfig, seed: int, position_to_set: list[int], plan=None, dtype=np.float32) -> ModelParams:
    """Shared builder: allocates max(position_to_set)+1 distinct layer sets and
    places them by position. Untied models map position i to set i."""
    rng = SplitMix64(seed)
    dtype = np.dtype(dtype).type

    def w(shape):
        return Tensor(rng.truncated_normal(shape, std=INIT_STD).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    n_sets = max(position_to_set) + 1
    patch_w = w((cfg.patch_dim, cfg.width))
    patch_b = zeros((cfg.width,))
    cls_token = w((1, cfg.width))
    pos_embed = w((1 + cfg.num_patches, cfg.width))
    sets = [_init_layer(cfg, rng, dtype) for _ in range(n_sets)]
    final_ln_g = Tensor(np.ones((cfg.width,), dtype=dtype), requires_grad=True)
    final_ln_b = zeros((cfg.width,))
    head_w = w((cfg.width, cfg.classes))
    head_b = zeros((cfg.classes,))
    return ModelParams(
        cfg=cfg,
        patch_w=patch_w, patch_b=patch_b,
        cls_token=cls_token, pos_embed=pos_embed,
        layers=[sets[m] for m in position_to_set],
        final_ln_g=final_ln_g, final_ln_b=final_ln_b,
        head_w=head_w, head_b=head_b,
        plan=plan,
    )


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Untied model: every position has its own layer set."""
    return build_params(cfg, seed, list(range(cfg.depth)), plan=None, dtype=dtype)


def reinit_head(params: ModelParams, classes: int, seed: int) -> None:
    """Replace the classifier for a new class count, in place."""
    dtype = params.head_w.data.dtype.type
    rng = SplitMix64(seed)
    params.head_w = Tensor(rng.truncated_normal((params.cfg.width, classes), std=INIT_STD).astype(dtype),
                           requires_grad=True)
    params.head_b = Tensor(np.zeros((classes,), dtype=dtype), requires_grad=True)
    params.cfg = replace(params.cfg, classes=classes)


# ---- forward ------------------------------------------------------------------


def _patchify(images: Tensor, cfg: ModelConfig) -> Tensor:
    b = images.shape[0]
    p, g = cfg.patch_size, cfg.grid
    x = T.reshape(images, (b, cfg.channels, g, p, g, p))
    x = T.permute(x, (0, 2, 4, 1, 3, 5))  # (B, gh, gw, C, p, p)
    return T.reshape(x, (b, cfg.num_patches, cfg.patch_dim))


def _block(x: Tensor, lp: LayerParams, cfg: ModelConfig, b: int, n: int) -> Tensor:
    d, h, dh = cfg.width, cfg.heads, cfg.head_dim

    hsa = T.layer_norm(x, lp.ln1_g, lp.ln1_b, LN_EPS)
    qkv = T.add(T.matmul(hsa, lp.qkv_w), lp.qkv_b)          # (B, N, 3d)
    qkv = T.reshape(qkv, (b, n, 3, h, dh))
    qkv = T.permute(qkv, (2, 0, 3, 1, 4))                   # (3, B, h, N, dh)
    q = T.index_axis(qkv, 0, 0)
    k = T.index_axis(qkv, 0, 1)
    v = T.index_axis(qkv, 0, 2)
    att = T.matmul(q, T.permute(k, (0, 1, 3, 2)))           # (B, h, N, N)
    att = T.scale(att, 1.0 / np.sqrt(dh))
    att = T.softmax_rows(att)
    o = T.matmul(att, v)                                    # (B, h, N, dh)
    o = T.reshape(T.permute(o, (0, 2, 1, 3)), (b, n, d))
    x = T.add(x, T.add(T.matmul(o, lp.out_w), lp.out_b))

    hmlp = T.layer_norm(x, lp.ln2_g, lp.ln2_b, LN_EPS)
    hmlp = T.gelu(T.add(T.matmul(hmlp, lp.up_w), lp.up_b))
    return T.add(x, T.add(T.matmul(hmlp, lp.down_w), lp.down_b))


def forward_logits(params: ModelParams, images: Tensor) -> Tensor:
    """Logits (B, classes) for a batch of images (B, C, H, W)."""
    cfg = params.cfg
    expect = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.data.ndim != 4 or images.shape[1:] != expect:
        raise T.ShapeError(f"forward_logits: images {images.shape} do not match (B,) + {expect}")
    b = images.shape[0]
    n = 1 + cfg.num_patches

    x = _patchify(images, cfg)
    x = T.add(T.matmul(x, params.patch_w), params.patch_b)
    cls = T.broadcast_to(T.reshape(params.cls_token, (1, 1, cfg.width)), (b, 1, cfg.width))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, params.pos_embed)
    for lp in params.layers:
        x = _block(x, lp, cfg, b, n)
    x0 = T.index_axis(x, 1, 0)  # class position
    x0 = T.layer_norm(x0, params.final_ln_g, params.final_ln_b, LN_EPS)
    return T.add(T.matmul(x0, params.head_w), params.head_b)
