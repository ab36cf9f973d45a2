"""Vision Transformer encoder, MAE decoder, projector and normalisation head.

Weights live in flat ``name -> Tensor`` dictionaries so checkpoints and
optimizers can walk them without a module tree. Linear weights are stored
as ``[in, out]``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from . import autograd as ag
from .autograd import Tensor

Role = Literal["teacher_moco", "teacher_mae", "student", "classifier", "pretrain"]
Pooling = Literal["mean_tokens", "class_token"]

ROLES = ("teacher_moco", "teacher_mae", "student", "classifier", "pretrain")
TEACHER_ROLES = ("teacher_moco", "teacher_mae")
LN_EPS = 1e-6


class FrozenWeightsError(RuntimeError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    heads: int = 4
    dim: int = 64
    mlp_ratio: float = 4.0
    decoder_depth: int = 1
    decoder_dim: int = 64
    decoder_heads: int = 4
    use_class_token: bool = False
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if min(self.depth, self.heads, self.dim, self.channels) < 1 or self.decoder_depth < 0:
            raise ValueError("depth, heads, dim and channels must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def replace(self, **changes) -> "ViTConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PRESETS: dict[str, ViTConfig] = {
    # ImageNet-scale shapes, patch 16 on 224px -> 196 tokens
    "base": ViTConfig(224, 16, 12, 12, 768, decoder_depth=8, decoder_dim=512, decoder_heads=16),
    "large": ViTConfig(224, 16, 24, 16, 1024, decoder_depth=8, decoder_dim=512, decoder_heads=16),
    "small": ViTConfig(224, 16, 12, 6, 384, decoder_depth=8, decoder_dim=512, decoder_heads=16),
    # desk scale, 32px inputs
    "micro": ViTConfig(32, 4, 4, 4, 64, decoder_depth=1, decoder_dim=64, decoder_heads=4),
    "tiny": ViTConfig(32, 4, 6, 4, 128, decoder_depth=2, decoder_dim=64, decoder_heads=4),
}


def preset(name: str, **overrides) -> ViTConfig:
    try:
        cfg = PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


# -- parameter construction -----------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _block_shapes(prefix: str, dim: int, hidden: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.norm1.gamma", (dim,)),
        (f"{prefix}.norm1.beta", (dim,)),
        (f"{prefix}.attn.qkv.weight", (dim, 3 * dim)),
        (f"{prefix}.attn.qkv.bias", (3 * dim,)),
        (f"{prefix}.attn.proj.weight", (dim, dim)),
        (f"{prefix}.attn.proj.bias", (dim,)),
        (f"{prefix}.norm2.gamma", (dim,)),
        (f"{prefix}.norm2.beta", (dim,)),
        (f"{prefix}.mlp.fc1.weight", (dim, hidden)),
        (f"{prefix}.mlp.fc1.bias", (hidden,)),
        (f"{prefix}.mlp.fc2.weight", (hidden, dim)),
        (f"{prefix}.mlp.fc2.bias", (dim,)),
    ]


def encoder_shapes(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    tokens = cfg.num_patches + int(cfg.use_class_token)
    shapes = [
        ("patch_embed.weight", (cfg.patch_dim, cfg.dim)),
        ("patch_embed.bias", (cfg.dim,)),
        ("pos_embed", (tokens, cfg.dim)),
    ]
    if cfg.use_class_token:
        shapes.append(("cls_token", (1, cfg.dim)))
    for i in range(cfg.depth):
        shapes += _block_shapes(f"blocks.{i}", cfg.dim, cfg.mlp_hidden)
    shapes += [("norm.gamma", (cfg.dim,)), ("norm.beta", (cfg.dim,))]
    return shapes


def decoder_shapes(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    tokens = cfg.num_patches + int(cfg.use_class_token)
    d = cfg.decoder_dim
    shapes = [
        ("decoder.embed.weight", (cfg.dim, d)),
        ("decoder.embed.bias", (d,)),
        ("decoder.mask_token", (1, d)),
        ("decoder.pos_embed", (tokens, d)),
    ]
    for i in range(cfg.decoder_depth):
        shapes += _block_shapes(f"decoder.blocks.{i}", d, int(d * cfg.mlp_ratio))
    shapes += [
        ("decoder.norm.gamma", (d,)),
        ("decoder.norm.beta", (d,)),
        ("decoder.pred.weight", (d, cfg.patch_dim)),
        ("decoder.pred.bias", (cfg.patch_dim,)),
    ]
    return shapes


def _init_array(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "bias"):
        return np.zeros(shape)
    return trunc_normal(rng, shape)


@dataclass
class ModelWeights:
    config: ViTConfig
    params: dict[str, Tensor]
    role: str = "student"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def is_teacher(self) -> bool:
        return self.role in TEACHER_ROLES

    @property
    def has_decoder(self) -> bool:
        return "decoder.pred.weight" in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self, prefix: str = "") -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.params.items() if n.startswith(prefix)]

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def freeze(self, role: str | None = None) -> "ModelWeights":
        """Mark every array read-only and untracked; teacher roles stay this way."""
        if role is not None:
            self.role = role
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        return self

    def copy(self, role: str | None = None, prefixes: Iterable[str] | None = None) -> "ModelWeights":
        """Deep copy; optionally keep only parameters under ``prefixes``."""
        keep = tuple(prefixes) if prefixes is not None else None
        params = {
            n: Tensor(t.data.copy(), requires_grad=(role or self.role) not in TEACHER_ROLES, dtype=t.dtype)
            for n, t in self.params.items()
            if keep is None or n.startswith(keep)
        }
        out = ModelWeights(self.config, params, role or self.role)
        return out.freeze() if out.is_teacher else out

    def encoder_only(self, role: str | None = None) -> "ModelWeights":
        names = {n for n, _ in encoder_shapes(self.config)}
        out = self.copy(role=role)
        out.params = {n: t for n, t in out.params.items() if n in names}
        return out


def init_weights(
    cfg: ViTConfig,
    rng: np.random.Generator | int = 0,
    role: str = "student",
    decoder: bool = False,
) -> ModelWeights:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    shapes = encoder_shapes(cfg) + (decoder_shapes(cfg) if decoder else [])
    params = {name: Tensor(_init_array(name, shape, rng), requires_grad=True) for name, shape in shapes}
    weights = ModelWeights(cfg, params, role)
    return weights.freeze() if weights.is_teacher else weights


def param_count(cfg: ViTConfig, decoder: bool = False) -> int:
    shapes = encoder_shapes(cfg) + (decoder_shapes(cfg) if decoder else [])
    return sum(int(np.prod(s)) for _, s in shapes)


@dataclass
class Projector:
    """Single linear map from student width to teacher width."""

    weight: Tensor
    bias: Tensor

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


def init_projector(dim_student: int, dim_teacher: int, rng=0, identity: bool = False) -> Projector:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if identity:
        if dim_student != dim_teacher:
            raise ValueError("identity projector needs equal widths")
        w = np.eye(dim_student)
    else:
        w = trunc_normal(rng, (dim_student, dim_teacher))
    return Projector(Tensor(w, requires_grad=True), Tensor(np.zeros(dim_teacher), requires_grad=True))


@dataclass
class NormHead:
    """Layer norm applied to pooled teacher features; frozen with the teacher."""

    gamma: Tensor
    beta: Tensor
    eps: float = LN_EPS

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


def init_norm_head(dim_teacher: int, eps: float = LN_EPS) -> NormHead:
    head = NormHead(Tensor(np.ones(dim_teacher)), Tensor(np.zeros(dim_teacher)), eps)
    head.gamma.data.flags.writeable = False
    head.beta.data.flags.writeable = False
    return head


# -- forward passes --------------------------------------------------------


def patchify(images, cfg: ViTConfig) -> np.ndarray:
    """[B, C, H, W] -> [B, N, p*p*C]; raster patch order, channel-major inside a patch."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] images, got shape {images.shape}")
    b, c, h, w = images.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.channels:
        raise ValueError(
            f"image shape {(c, h, w)} does not match config ({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
        )
    p = cfg.patch_size
    g = h // p
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, c * p * p))


def unpatchify(patches: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    b = patches.shape[0]
    p, c = cfg.patch_size, cfg.channels
    g = cfg.image_size // p
    x = patches.reshape(b, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, g * p, g * p)


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    qkv = ag.linear(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = qkv.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.matmul(q, k.swapaxes(-1, -2)) * (dh**-0.5)
    attn = ag.softmax(scores, axis=-1)
    out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ag.linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def _block(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    h = ag.layer_norm(x, params[f"{prefix}.norm1.gamma"], params[f"{prefix}.norm1.beta"], LN_EPS)
    x = x + _attention(h, params, f"{prefix}.attn", heads)
    h = ag.layer_norm(x, params[f"{prefix}.norm2.gamma"], params[f"{prefix}.norm2.beta"], LN_EPS)
    h = ag.gelu(ag.linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return x + ag.linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])


def _check_teacher(weights: ModelWeights) -> None:
    if weights.is_teacher and any(t.requires_grad for t in weights.params.values()):
        raise FrozenWeightsError(f"{weights.role} weights must be frozen before use")


def encode(weights: ModelWeights, images, mask=None, stop_patch_grad: bool = False) -> Tensor:
    """Encode images into token features [B, V(+1), dim].

    ``mask`` is a MaskSpec (or anything with ``visible_indices``); only its
    visible tokens enter the transformer. With ``stop_patch_grad`` the patch
    embedding receives no gradient. Teacher weights run without a graph.
    """
    _check_teacher(weights)
    if weights.is_teacher and ag.is_grad_enabled():
        with ag.no_grad():
            return encode(weights, images, mask, stop_patch_grad)

    cfg, p = weights.config, weights.params
    patches = Tensor(patchify(images, cfg), dtype=p["patch_embed.weight"].dtype)
    b = patches.shape[0]
    pe_w, pe_b = p["patch_embed.weight"], p["patch_embed.bias"]
    if stop_patch_grad:
        pe_w, pe_b = pe_w.detach(), pe_b.detach()

    pos = p["pos_embed"]
    offset = int(cfg.use_class_token)
    if mask is None:
        x = ag.linear(patches, pe_w, pe_b)
        pos_patch = pos[offset:] if offset else pos
        x = x + pos_patch
    else:
        visible = _visible_array(mask, b, cfg.num_patches)
        x = ag.linear(ag.gather_tokens(patches, visible), pe_w, pe_b)
        x = x + ag.embedding(pos, visible + offset)

    if cfg.use_class_token:
        cls = p["cls_token"] + pos[0:1]
        cls = ag.broadcast_to(cls.reshape(1, 1, cfg.dim), (b, 1, cfg.dim))
        x = ag.concat([cls, x], axis=1)

    for i in range(cfg.depth):
        x = _block(x, p, f"blocks.{i}", cfg.heads)
    return ag.layer_norm(x, p["norm.gamma"], p["norm.beta"], LN_EPS)


def _visible_array(mask, batch: int, tokens: int) -> np.ndarray:
    visible = getattr(mask, "visible_indices", mask)
    token_count = getattr(mask, "token_count", tokens)
    if token_count != tokens:
        raise ValueError(f"mask covers {token_count} tokens, model has {tokens}")
    rows = [np.asarray(r, dtype=np.int64) for r in visible]
    if len({len(r) for r in rows}) > 1:
        raise ValueError("masked encode needs the same visible count in every sample")
    if len(rows) != batch:
        raise ValueError(f"mask has {len(rows)} samples, batch has {batch}")
    return np.stack(rows)


def decode_mae(weights: ModelWeights, encoded: Tensor, mask=None) -> Tensor:
    """Reconstruct every patch [B, N, p*p*C] from encoded visible tokens."""
    cfg, p = weights.config, weights.params
    if not weights.has_decoder:
        raise ValueError("weights carry no decoder parameters")
    b = encoded.shape[0]
    n = cfg.num_patches
    offset = int(cfg.use_class_token)
    if mask is None:
        visible = np.broadcast_to(np.arange(n), (b, n))
    else:
        visible = _visible_array(mask, b, n)
    v = visible.shape[1]
    if encoded.shape[1] != v + offset:
        raise ValueError(f"encoded has {encoded.shape[1]} tokens, mask implies {v + offset}")

    y = ag.linear(encoded, p["decoder.embed.weight"], p["decoder.embed.bias"])
    d = cfg.decoder_dim
    cls = y[:, :1] if offset else None
    tokens = y[:, offset:] if offset else y
    fill = ag.broadcast_to(p["decoder.mask_token"].reshape(1, 1, d), (b, n - v, d))
    full = ag.concat([tokens, fill], axis=1)
    order = np.stack([np.concatenate([row, np.setdiff1d(np.arange(n), row)]) for row in visible])
    restore = np.argsort(order, axis=1, kind="stable")
    full = ag.gather_tokens(full, restore)
    if cls is not None:
        full = ag.concat([cls, full], axis=1)
    full = full + p["decoder.pos_embed"]

    for i in range(cfg.decoder_depth):
        full = _block(full, p, f"decoder.blocks.{i}", cfg.decoder_heads)
    full = ag.layer_norm(full, p["decoder.norm.gamma"], p["decoder.norm.beta"], LN_EPS)
    pred = ag.linear(full, p["decoder.pred.weight"], p["decoder.pred.bias"])
    return pred[:, offset:] if offset else pred


def pool(features: Tensor, pooling: str = "mean_tokens", class_token: bool = False) -> Tensor:
    if pooling == "class_token":
        if not class_token:
            raise ValueError("class_token pooling needs a model built with use_class_token")
        return features[:, 0]
    if pooling != "mean_tokens":
        raise ValueError(f"unknown pooling {pooling!r}")
    tokens = features[:, 1:] if class_token else features
    return tokens.mean(axis=1)


def student_representation(
    features: Tensor, projector: Projector, pooling: str = "mean_tokens", class_token: bool = False
) -> Tensor:
    return projector(pool(features, pooling, class_token))


def teacher_representation(
    features: Tensor, head: NormHead, pooling: str = "mean_tokens", class_token: bool = False
) -> Tensor:
    with ag.no_grad():
        return head(pool(features.detach(), pooling, class_token))


@dataclass
class Classifier:
    """Linear head on pooled encoder features."""

    weight: Tensor
    bias: Tensor
    pooling: str = "mean_tokens"

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, features: Tensor, class_token: bool = False) -> Tensor:
        return ag.linear(pool(features, self.pooling, class_token), self.weight, self.bias)


HEAD_INIT_STD = 2e-5


def init_classifier(dim: int, num_classes: int, rng=0, pooling: str = "mean_tokens") -> Classifier:
    """Near-zero weights so the first logits are uniform and the first loss is ln(num_classes)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return Classifier(
        Tensor(trunc_normal(rng, (dim, num_classes), std=HEAD_INIT_STD), requires_grad=True),
        Tensor(np.zeros(num_classes), requires_grad=True),
        pooling,
    )
