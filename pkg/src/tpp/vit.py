"""A small pre-norm Vision Transformer with explicit parameter accounting.

The backbone is deliberately plain: linear patch embedding, learnable
class token and positional embeddings, pre-norm blocks (LN -> MHSA ->
residual, LN -> MLP -> residual), final LN. PEFT mechanisms instrument
the blocks through optional slots that stay None until attached, so an
uninstrumented model pays nothing for them.

Heads are a single linear map from the class token (classification) or a
per-patch linear projection unpatchified to full resolution (segmentation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ShapeError
from .registry import Param, ParamGroup, ParamRegistry
from .rng import SeededRng
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ArgumentError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ArgumentError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.num_channels * self.patch_size * self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class ClassificationSpec:
    num_classes: int


@dataclass(frozen=True)
class SegmentationSpec:
    num_classes: int


HeadSpec = ClassificationSpec | SegmentationSpec


# -- patch layout ---------------------------------------------------------


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Split [C,H,W] (or [B,C,H,W]) into row-major [N, C*p*p] patches."""
    single = image.ndim == 3
    x = T.reshape(image, (1,) + image.shape) if single else image
    if x.ndim != 4:
        raise ShapeError(f"patchify: expected [C,H,W] or [B,C,H,W], got {list(image.shape)}")
    b, c, h, w = x.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ArgumentError(f"patchify: dims {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = T.reshape(x, (b, c, gh, p, gw, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, gh * gw, c * p * p))
    return T.reshape(x, x.shape[1:]) if single else x


def unpatchify(patches: Tensor, patch_size: int, channels: int, image_size: int) -> Tensor:
    """Inverse of patchify: [N, C*p*p] (or [B,N,...]) back to [C,H,W] / [B,C,H,W]."""
    single = patches.ndim == 2
    x = T.reshape(patches, (1,) + patches.shape) if single else patches
    b, n, _ = x.shape
    p = patch_size
    g = image_size // p
    if n != g * g:
        raise ShapeError(f"unpatchify: {n} patches do not tile a {g}x{g} grid")
    x = T.reshape(x, (b, g, g, channels, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    x = T.reshape(x, (b, channels, g * p, g * p))
    return T.reshape(x, x.shape[1:]) if single else x


# -- building blocks ------------------------------------------------------


class Linear:
    """y = x @ W + b with params registered under `name`."""

    def __init__(self, registry: ParamRegistry, rng: SeededRng, name: str,
                 din: int, dout: int, group: ParamGroup,
                 init: str = "trunc_normal"):
        if init == "trunc_normal":
            w = rng.child("w").trunc_normal((din, dout), std=0.02)
        elif init == "zeros":
            w = np.zeros((din, dout))
        else:
            raise ArgumentError(f"unknown init: {init}")
        self.weight = registry.register(f"{name}.weight", w, group)
        self.bias = registry.register(f"{name}.bias", np.zeros(dout), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight.tensor), self.bias.tensor)


class LayerNorm:
    def __init__(self, registry: ParamRegistry, name: str, dim: int, group: ParamGroup):
        self.weight = registry.register(f"{name}.weight", np.ones(dim), group)
        self.bias = registry.register(f"{name}.bias", np.zeros(dim), group)
        self.eps = 1e-5

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight.tensor, self.bias.tensor, self.eps)


class TransformerBlock:
    """Pre-norm block; PEFT slots filled by peft.attach, None otherwise."""

    def __init__(self, registry: ParamRegistry, rng: SeededRng, name: str,
                 dim: int, num_heads: int, mlp_dim: int, group: ParamGroup):
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.ln1 = LayerNorm(registry, f"{name}.ln1", dim, group)
        self.q = Linear(registry, rng.child("q"), f"{name}.attn.q", dim, dim, group)
        self.k = Linear(registry, rng.child("k"), f"{name}.attn.k", dim, dim, group)
        self.v = Linear(registry, rng.child("v"), f"{name}.attn.v", dim, dim, group)
        self.proj = Linear(registry, rng.child("proj"), f"{name}.attn.proj", dim, dim, group)
        self.ln2 = LayerNorm(registry, f"{name}.ln2", dim, group)
        self.fc1 = Linear(registry, rng.child("fc1"), f"{name}.mlp.fc1", dim, mlp_dim, group)
        self.fc2 = Linear(registry, rng.child("fc2"), f"{name}.mlp.fc2", mlp_dim, dim, group)
        # PEFT instrumentation slots
        self.adapter = None       # (down: Linear, up: Linear)
        self.adaptformer = None   # (down: Linear, up: Linear, scale: float)
        self.ssf = None           # dict site -> (gamma: Param, beta: Param)
        self.lora = None          # dict {"q"|"v"} -> (A: Param, B: Param, scaling: float)

    def _modulate(self, site: str, x: Tensor) -> Tensor:
        if self.ssf is None:
            return x
        gamma, beta = self.ssf[site]
        return T.add(T.mul(x, gamma.tensor), beta.tensor)

    def _project(self, which: str, layer: Linear, x: Tensor) -> Tensor:
        out = layer(x)
        if self.lora is not None and which in self.lora:
            a, b, scaling = self.lora[which]
            low = T.matmul(T.matmul(x, a.tensor), b.tensor)
            out = T.add(out, T.scale(low, scaling))
        return self._modulate(which, out)

    def _attention(self, x: Tensor) -> Tensor:
        bsz, seq, dim = x.shape
        h, hd = self.num_heads, self.head_dim

        def split_heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (bsz, seq, h, hd)), (0, 2, 1, 3))

        q = split_heads(self._project("q", self.q, x))
        k = split_heads(self._project("k", self.k, x))
        v = split_heads(self._project("v", self.v, x))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = T.softmax(scores, 1.0)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bsz, seq, dim))
        return self._project("proj", self.proj, out)

    def _mlp(self, h: Tensor) -> Tensor:
        m = T.gelu(self._modulate("fc1", self.fc1(h)))
        return self._modulate("fc2", self.fc2(m))

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self._attention(self._modulate("ln1", self.ln1(x))))
        h = self._modulate("ln2", self.ln2(x))
        m = self._mlp(h)
        if self.adapter is not None:
            down, up = self.adapter
            m = T.add(m, up(T.gelu(down(m))))
        out = T.add(x, m)
        if self.adaptformer is not None:
            down, up, s = self.adaptformer
            out = T.add(out, T.scale(up(T.gelu(down(h))), s))
        return out


class VisionTransformer:
    """Backbone: patch embedding, class token, positional embeddings, blocks."""

    def __init__(self, cfg: ViTConfig, registry: ParamRegistry, rng: SeededRng,
                 prefix: str = "backbone", group: ParamGroup = ParamGroup.BACKBONE):
        self.cfg = cfg
        self.registry = registry
        self.prefix = prefix
        d = cfg.embed_dim
        self.patch_embed = Linear(registry, rng.child("patch_embed"),
                                  f"{prefix}.patch_embed", cfg.patch_dim, d, group)
        self.cls_token = registry.register(
            f"{prefix}.cls_token", rng.child("cls").trunc_normal((d,)), group)
        self.pos_embed = registry.register(
            f"{prefix}.pos_embed",
            rng.child("pos").trunc_normal((cfg.num_patches + 1, d)), group)
        self.blocks = [
            TransformerBlock(registry, rng.child(f"block{i}"),
                             f"{prefix}.blocks.{i}", d, cfg.num_heads, cfg.mlp_dim, group)
            for i in range(cfg.depth)
        ]
        self.ln = LayerNorm(registry, f"{prefix}.ln", d, group)
        self.vpt = None  # set by peft.attach: (mode, [prompt Param per instrumented layer])
        self.peft_spec = None
        self.last_block_input_lengths: list[int] = []

    # -- forward -----------------------------------------------------------

    def embed_patches(self, images: Tensor) -> Tensor:
        """[B,C,H,W] -> [B,N,embed_dim] patch tokens (no positions added)."""
        return self.patch_embed(patchify(images, self.cfg.patch_size))

    def _broadcast_rows(self, rows: Tensor, bsz: int) -> Tensor:
        # [K,d] learnable rows tiled to [B,K,d] through a broadcasting add
        k, d = rows.shape
        return T.add(T.reshape(rows, (1, k, d)), T.zeros((bsz, 1, d)))

    def forward_features(self, tokens: Tensor, patch_index: np.ndarray | None = None) -> Tensor:
        """Run class token + patch tokens through the blocks and final LN.

        tokens: [B,K,embed_dim] patch tokens. When patch_index is given
        (shape [B,K]) positional embeddings are gathered per sample, which
        is how the masked-reconstruction encoder sees only visible patches.
        Prompt tokens (VPT) are inserted after the class token and dropped
        again before returning, so the output is always [B, 1+K, d].
        """
        d = self.cfg.embed_dim
        if tokens.shape[-1] != d:
            raise ShapeError(f"forward_features: token dim {tokens.shape[-1]} != embed_dim {d}")
        bsz, k = tokens.shape[0], tokens.shape[1]
        pos_patches = T.narrow(self.pos_embed.tensor, 0, 1, self.cfg.num_patches)
        if patch_index is None:
            if k != self.cfg.num_patches:
                raise ShapeError(
                    f"forward_features: got {k} tokens, config builds {self.cfg.num_patches} patches"
                )
            x = T.add(tokens, pos_patches)
        else:
            x = T.add(tokens, T.index_rows(pos_patches, patch_index))
        cls = T.add(self.cls_token.tensor, T.narrow(self.pos_embed.tensor, 0, 0, 1))
        x = T.concat([self._broadcast_rows(cls, bsz), x], axis=1)

        num_prompts = 0
        if self.vpt is not None:
            mode, prompt_params = self.vpt
            num_prompts = prompt_params[0].tensor.shape[0]
            x = T.concat([
                T.narrow(x, 1, 0, 1),
                self._broadcast_rows(prompt_params[0].tensor, bsz),
                T.narrow(x, 1, 1, k),
            ], axis=1)

        self.last_block_input_lengths = []
        for i, block in enumerate(self.blocks):
            if self.vpt is not None and self.vpt[0] == "deep" and i > 0:
                prompts = self.vpt[1][i]
                x = T.concat([
                    T.narrow(x, 1, 0, 1),
                    self._broadcast_rows(prompts.tensor, bsz),
                    T.narrow(x, 1, 1 + num_prompts, k),
                ], axis=1)
            self.last_block_input_lengths.append(x.shape[1])
            x = block(x)

        x = self.ln(x)
        if num_prompts:
            x = T.concat([T.narrow(x, 1, 0, 1), T.narrow(x, 1, 1 + num_prompts, k)], axis=1)
        return x

    def forward_images(self, images: Tensor) -> Tensor:
        """[B,C,H,W] -> [B, 1+N, embed_dim] features."""
        return self.forward_features(self.embed_patches(images))


class ClassificationHead:
    """Linear map from the class-token representation."""

    def __init__(self, cfg: ViTConfig, spec: ClassificationSpec,
                 registry: ParamRegistry, rng: SeededRng, prefix: str = "head"):
        self.spec = spec
        self.fc = Linear(registry, rng.child("fc"), f"{prefix}.fc",
                         cfg.embed_dim, spec.num_classes, ParamGroup.HEAD)

    def __call__(self, features: Tensor) -> Tensor:
        bsz, _, d = features.shape
        cls = T.reshape(T.narrow(features, 1, 0, 1), (bsz, d))
        return self.fc(cls)


class SegmentationHead:
    """Per-patch linear projection to class*p*p logits, unpatchified."""

    def __init__(self, cfg: ViTConfig, spec: SegmentationSpec,
                 registry: ParamRegistry, rng: SeededRng, prefix: str = "head"):
        self.cfg = cfg
        self.spec = spec
        self.proj = Linear(registry, rng.child("proj"), f"{prefix}.proj",
                           cfg.embed_dim, spec.num_classes * cfg.patch_size ** 2,
                           ParamGroup.HEAD)

    def __call__(self, features: Tensor) -> Tensor:
        bsz, seq, _ = features.shape
        n = self.cfg.num_patches
        if seq != n + 1:
            raise ShapeError(f"segmentation head: expected {n + 1} tokens, got {seq}")
        logits = self.proj(T.narrow(features, 1, 1, n))
        return unpatchify(logits, self.cfg.patch_size, self.spec.num_classes,
                          self.cfg.image_size)


def build_head(cfg: ViTConfig, spec: HeadSpec, registry: ParamRegistry,
               rng: SeededRng, prefix: str = "head"):
    if isinstance(spec, ClassificationSpec):
        return ClassificationHead(cfg, spec, registry, rng, prefix)
    if isinstance(spec, SegmentationSpec):
        return SegmentationHead(cfg, spec, registry, rng, prefix)
    raise ArgumentError(f"unknown head spec: {spec!r}")


def build_backbone(cfg: ViTConfig, seed: int, registry: ParamRegistry | None = None):
    """Deterministic backbone construction: same config + seed, same params."""
    registry = registry if registry is not None else ParamRegistry()
    rng = SeededRng(seed, "init/backbone")
    return VisionTransformer(cfg, registry, rng), registry
