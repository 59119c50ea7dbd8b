"""DeiT-style Vision Transformer: configuration, parameters and forward pass.

Everything is batched over a leading image axis. Attention maps have shape
``(batch, heads, T, T)`` with ``T = N + 1`` (patch tokens plus CLS).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Protocol

import numpy as np

from ..errors import DimensionError, NumericError
from ..tensor import (
    DTYPE,
    RngState,
    gelu,
    layer_norm,
    matmul,
    randn,
    softmax_rows,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 28
    patch_size: int = 7
    channels: int = 1
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    num_classes: int = 10
    mlp_ratio: int = 4

    def __post_init__(self):
        for f in fields(self):
            if int(getattr(self, f.name)) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def attention_shape(self) -> tuple[int, int, int, int]:
        """(L, H, T, T): shape of the per-weight attention statistics."""
        return (self.num_layers, self.num_heads, self.seq_len, self.seq_len)

    def to_dict(self) -> dict[str, int]:
        return {k: int(v) for k, v in asdict(self).items()}


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered mapping of parameter name to shape."""
    d, T = cfg.embed_dim, cfg.seq_len
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "cls": (d,),
        "pos": (T, d),
    }
    for l in range(cfg.num_layers):
        p = f"blocks.{l}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wproj"] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "w1"] = (d, cfg.hidden_dim)
        shapes[p + "w2"] = (cfg.hidden_dim, d)
    shapes["norm.g"] = (d,)
    shapes["norm.b"] = (d,)
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def linear_weight_names(cfg: ModelConfig) -> list[str]:
    """Names of all matrices that act as linear-layer weights."""
    names = ["patch.w"]
    for l in range(cfg.num_layers):
        names += [f"blocks.{l}.{w}" for w in ("wq", "wk", "wv", "wproj", "w1", "w2")]
    return names + ["head.w"]


def init_params(cfg: ModelConfig, rng: RngState, dtype=DTYPE) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf == "b":
            params[name] = np.zeros(shape, dtype=dtype)
        elif name in ("cls", "pos"):
            params[name] = randn(rng, shape, dtype) * dtype(0.02)
        else:
            params[name] = randn(rng, shape, dtype) * dtype(1.0 / math.sqrt(shape[0]))
    return params


def check_params(params: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    expected = parameter_shapes(cfg)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise DimensionError(
            f"parameter names do not match config (missing={sorted(missing)}, extra={sorted(extra)})"
        )
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DimensionError(
                f"parameter {name} has shape {params[name].shape}, config requires {shape}"
            )


class QuantHook(Protocol):
    """Fake-quantisation (or observation) points inside the forward pass."""

    def weight(self, name: str, w: np.ndarray) -> np.ndarray: ...

    def activation(self, site: str, x: np.ndarray) -> np.ndarray: ...


class AttentionFixer(Protocol):
    def apply_layer(self, a: np.ndarray, layer: int) -> np.ndarray: ...


AttentionTap = Callable[[int, np.ndarray], None]


class _NoQuant:
    def weight(self, name, w):
        return w

    def activation(self, site, x):
        return x


_NO_QUANT = _NoQuant()


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Split ``(B, H, W, C)`` images into ``(B, N, p*p*C)`` flattened patches.

    Patches are ordered row-major over the patch grid; inside a patch the
    layout is (row, col, channel).
    """
    if images.ndim == 3:
        images = images[None]
    B, Hh, Ww, C = images.shape
    if (Hh, Ww, C) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise DimensionError(
            f"image shape {(Hh, Ww, C)} does not match config "
            f"{(cfg.image_size, cfg.image_size, cfg.channels)}"
        )
    g, p = cfg.grid, cfg.patch_size
    x = images.reshape(B, g, p, g, p, C).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, g * g, p * p * C))


def embed(images: np.ndarray, params, cfg: ModelConfig, quant: QuantHook = _NO_QUANT):
    """Patch projection, CLS prepend and positional embedding: ``(B, T, d)``."""
    patches = patchify(images, cfg).astype(params["patch.w"].dtype, copy=False)
    pin = quant.activation("patch_in", patches)
    tok = matmul(pin, quant.weight("patch.w", params["patch.w"])) + params["patch.b"]
    B = tok.shape[0]
    cls = np.broadcast_to(params["cls"], (B, 1, cfg.embed_dim))
    return np.concatenate([cls, tok], axis=1) + params["pos"], patches


def _split_heads(x, cfg: ModelConfig):
    B, T, _ = x.shape
    return x.reshape(B, T, cfg.num_heads, cfg.head_dim).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(B, T, H * dh))


def mhsa_forward(
    x: np.ndarray,
    layer: int,
    params,
    cfg: ModelConfig,
    tap: Optional[AttentionTap] = None,
    plan: Optional[AttentionFixer] = None,
    quant: Optional[QuantHook] = None,
    cache: Optional[dict] = None,
) -> np.ndarray:
    """Multi-head self-attention on an already normalised ``(B, T, d)`` input.

    Fixing is applied to the post-softmax map; the tap sees the map actually
    used to mix the values.
    """
    quant = quant or _NO_QUANT
    p = f"blocks.{layer}."
    xin = quant.activation(p + "attn_in", x)
    q = _split_heads(matmul(xin, quant.weight(p + "wq", params[p + "wq"])), cfg)
    k = _split_heads(matmul(xin, quant.weight(p + "wk", params[p + "wk"])), cfg)
    v = _split_heads(matmul(xin, quant.weight(p + "wv", params[p + "wv"])), cfg)
    scale = x.dtype.type(1.0 / math.sqrt(cfg.head_dim))
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * scale
    bad = ~np.isfinite(scores).all(axis=(0, 2, 3))
    if bad.any():
        raise NumericError(f"non-finite attention logits at layer {layer} head {int(np.argmax(bad))}")
    a = softmax_rows(scores)
    if plan is not None:
        a = plan.apply_layer(a, layer)
    if tap is not None:
        tap(layer, a)
    o = _merge_heads(matmul(a, v))
    oin = quant.activation(p + "proj_in", o)
    out = matmul(oin, quant.weight(p + "wproj", params[p + "wproj"]))
    if cache is not None:
        cache.update(q=q, k=k, v=v, a=a, o=o, scale=scale)
    return out


def mlp_forward(x, layer, params, quant: Optional[QuantHook] = None, cache=None):
    quant = quant or _NO_QUANT
    p = f"blocks.{layer}."
    xin = quant.activation(p + "fc1_in", x)
    u = matmul(xin, quant.weight(p + "w1", params[p + "w1"]))
    g = gelu(u)
    gin = quant.activation(p + "fc2_in", g)
    out = matmul(gin, quant.weight(p + "w2", params[p + "w2"]))
    if cache is not None:
        cache.update(u=u, g=g)
    return out


def forward(
    images: np.ndarray,
    params,
    cfg: ModelConfig,
    plan: Optional[AttentionFixer] = None,
    quant: Optional[QuantHook] = None,
    tap: Optional[AttentionTap] = None,
    keep_cache: bool = False,
):
    """Batched forward pass. Returns ``(logits, cache)``; cache is None unless requested."""
    quant = quant or _NO_QUANT
    x, patches = embed(images, params, cfg, quant)
    cache = {"patches": patches, "layers": []} if keep_cache else None
    for l in range(cfg.num_layers):
        p = f"blocks.{l}."
        lc = {"x": x} if keep_cache else None
        y1, xhat1, rstd1 = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], LN_EPS)
        h = x + mhsa_forward(y1, l, params, cfg, tap=tap, plan=plan, quant=quant, cache=lc)
        y2, xhat2, rstd2 = layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)
        x = h + mlp_forward(y2, l, params, quant=quant, cache=lc)
        if keep_cache:
            lc.update(y1=y1, xhat1=xhat1, rstd1=rstd1, y2=y2, xhat2=xhat2, rstd2=rstd2)
            cache["layers"].append(lc)
    z, xhatf, rstdf = layer_norm(x[:, 0], params["norm.g"], params["norm.b"], LN_EPS)
    zin = quant.activation("head_in", z)
    logits = matmul(zin, quant.weight("head.w", params["head.w"])) + params["head.b"]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if keep_cache:
        cache.update(z=z, xhatf=xhatf, rstdf=rstdf)
    return logits, cache


def model_forward(image, params, cfg: ModelConfig, plan=None, quant=None, tap=None) -> np.ndarray:
    """Logits for a single ``(H, W, C)`` image or a batch."""
    single = image.ndim == 3
    logits, _ = forward(image[None] if single else image, params, cfg, plan=plan, quant=quant, tap=tap)
    return logits[0] if single else logits


def predict_logits(
    images: np.ndarray,
    params,
    cfg: ModelConfig,
    plan=None,
    quant=None,
    batch_size: int = 256,
) -> np.ndarray:
    """Forward ``images`` in fixed-size chunks and stack the logits."""
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(images[start : start + batch_size], params, cfg, plan=plan, quant=quant)
        out.append(logits)
    if not out:
        return np.zeros((0, cfg.num_classes), dtype=DTYPE)
    return np.concatenate(out, axis=0)
