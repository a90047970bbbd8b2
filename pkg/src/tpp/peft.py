"""Attachable PEFT mechanisms.

Each mechanism adds Target-group parameters to a built backbone (except
BitFit, which re-tags existing biases) and instruments the forward pass
through the block slots. All param-adding mechanisms are identity at
initialization: the instrumented forward equals the baseline forward
exactly until a training step changes the new parameters. VPT is the
documented exception, because extra attention keys renormalize the
softmax even when the prompts are zero.

Naming: every added parameter is prefixed with its mechanism name
(adapter., lora., ...) so audits can attribute it at a glance. BitFit
keeps the original backbone names since it adds nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, StateError
from .registry import ParamGroup, ParamRegistry
from .rng import SeededRng
from .vit import Linear, VisionTransformer


@dataclass(frozen=True)
class AdapterSpec:
    """Serial bottleneck after each block's MLP output, inside the residual."""
    bottleneck: int = 8


@dataclass(frozen=True)
class AdaptFormerSpec:
    """Parallel bottleneck reading LN2 output, scaled and added to the block output."""
    bottleneck: int = 8
    scale: float = 0.1


@dataclass(frozen=True)
class VptSpec:
    """Learnable prompt tokens inserted after the class token."""
    num_tokens: int = 10
    mode: str = "deep"  # "shallow": layer 0 only; "deep": fresh prompts every layer


@dataclass(frozen=True)
class SsfSpec:
    """Per-channel scale/shift after every linear and layer-norm output in each block."""


@dataclass(frozen=True)
class BitFitSpec:
    """No new parameters; existing bias terms become trainable Target params."""


@dataclass(frozen=True)
class LoraSpec:
    """Low-rank update on attention projections: W x + (alpha/rank) * B(A x)."""
    rank: int = 4
    alpha: float = 4.0
    targets: tuple[str, ...] = ("query", "value")


PeftSpec = AdapterSpec | AdaptFormerSpec | VptSpec | SsfSpec | BitFitSpec | LoraSpec

# sites modulated by SSF inside each block, with their channel width key
SSF_SITES = ("ln1", "q", "k", "v", "proj", "ln2", "fc1", "fc2")

_LORA_TARGET_MAP = {"query": "q", "value": "v"}


def mechanism_name(spec: PeftSpec) -> str:
    return {
        AdapterSpec: "adapter",
        AdaptFormerSpec: "adaptformer",
        VptSpec: "vpt",
        SsfSpec: "ssf",
        BitFitSpec: "bitfit",
        LoraSpec: "lora",
    }[type(spec)]


def attach(model: VisionTransformer, spec: PeftSpec, rng: SeededRng) -> VisionTransformer:
    """Install a PEFT mechanism on a built backbone (once per model)."""
    if model.peft_spec is not None:
        raise StateError(f"a PEFT spec is already attached: {model.peft_spec!r}")
    registry = model.registry
    cfg = model.cfg
    d = cfg.embed_dim

    if isinstance(spec, AdapterSpec):
        if spec.bottleneck < 1:
            raise ArgumentError(f"adapter bottleneck must be >= 1, got {spec.bottleneck}")
        for i, block in enumerate(model.blocks):
            brng = rng.child(f"block{i}")
            down = Linear(registry, brng.child("down"), f"adapter.blocks.{i}.down",
                          d, spec.bottleneck, ParamGroup.TARGET)
            up = Linear(registry, brng.child("up"), f"adapter.blocks.{i}.up",
                        spec.bottleneck, d, ParamGroup.TARGET, init="zeros")
            block.adapter = (down, up)

    elif isinstance(spec, AdaptFormerSpec):
        if spec.bottleneck < 1:
            raise ArgumentError(f"adaptformer bottleneck must be >= 1, got {spec.bottleneck}")
        for i, block in enumerate(model.blocks):
            brng = rng.child(f"block{i}")
            down = Linear(registry, brng.child("down"), f"adaptformer.blocks.{i}.down",
                          d, spec.bottleneck, ParamGroup.TARGET)
            up = Linear(registry, brng.child("up"), f"adaptformer.blocks.{i}.up",
                        spec.bottleneck, d, ParamGroup.TARGET, init="zeros")
            block.adaptformer = (down, up, spec.scale)

    elif isinstance(spec, VptSpec):
        if spec.num_tokens < 1:
            raise ArgumentError(f"vpt num_tokens must be >= 1, got {spec.num_tokens}")
        if spec.mode not in ("shallow", "deep"):
            raise ArgumentError(f"vpt mode must be shallow or deep, got {spec.mode!r}")
        layers = range(cfg.depth) if spec.mode == "deep" else range(1)
        prompts = [
            registry.register(
                f"vpt.layers.{i}.prompts",
                rng.child(f"layer{i}").trunc_normal((spec.num_tokens, d)),
                ParamGroup.TARGET,
            )
            for i in layers
        ]
        model.vpt = (spec.mode, prompts)

    elif isinstance(spec, SsfSpec):
        mlp_dim = cfg.mlp_dim
        for i, block in enumerate(model.blocks):
            sites = {}
            for site in SSF_SITES:
                channels = mlp_dim if site == "fc1" else d
                gamma = registry.register(f"ssf.blocks.{i}.{site}.gamma",
                                          np.ones(channels), ParamGroup.TARGET)
                beta = registry.register(f"ssf.blocks.{i}.{site}.beta",
                                         np.zeros(channels), ParamGroup.TARGET)
                sites[site] = (gamma, beta)
            block.ssf = sites

    elif isinstance(spec, BitFitSpec):
        for p in registry.params(group=ParamGroup.BACKBONE):
            if p.name.endswith(".bias"):
                p.trainable = True
                p.group = ParamGroup.TARGET

    elif isinstance(spec, LoraSpec):
        if spec.rank < 1:
            raise ArgumentError(f"lora rank must be >= 1, got {spec.rank}")
        if spec.rank > d:
            raise ArgumentError(f"lora rank {spec.rank} exceeds embed_dim {d}")
        bad = [t for t in spec.targets if t not in _LORA_TARGET_MAP]
        if bad:
            raise ArgumentError(f"unknown lora targets: {bad}; allowed: query, value")
        scaling = spec.alpha / spec.rank
        for i, block in enumerate(model.blocks):
            brng = rng.child(f"block{i}")
            slots = {}
            for target in spec.targets:
                key = _LORA_TARGET_MAP[target]
                a = registry.register(f"lora.blocks.{i}.{key}.A",
                                      brng.child(f"{key}A").normal((d, spec.rank), std=0.02),
                                      ParamGroup.TARGET)
                b = registry.register(f"lora.blocks.{i}.{key}.B",
                                      np.zeros((spec.rank, d)), ParamGroup.TARGET)
                slots[key] = (a, b, scaling)
            block.lora = slots

    else:
        raise ArgumentError(f"unknown PEFT spec: {spec!r}")

    model.peft_spec = spec
    return model


def reinit_target_params(model: VisionTransformer, rng: SeededRng) -> None:
    """Reset Target params to the mechanism's default (identity-at-init) values."""
    spec = model.peft_spec
    if spec is None:
        raise StateError("no PEFT mechanism attached")
    registry = model.registry
    d = model.cfg.embed_dim

    if isinstance(spec, (AdapterSpec, AdaptFormerSpec)):
        prefix = mechanism_name(spec)
        for i in range(model.cfg.depth):
            brng = rng.child(f"block{i}")
            registry.get(f"{prefix}.blocks.{i}.down.weight").tensor.data = (
                brng.child("down").child("w").trunc_normal((d, spec.bottleneck), std=0.02))
            registry.get(f"{prefix}.blocks.{i}.down.bias").tensor.data = np.zeros(spec.bottleneck)
            registry.get(f"{prefix}.blocks.{i}.up.weight").tensor.data = np.zeros((spec.bottleneck, d))
            registry.get(f"{prefix}.blocks.{i}.up.bias").tensor.data = np.zeros(d)
    elif isinstance(spec, VptSpec):
        for p in registry.params(prefix="vpt."):
            layer = p.name.split(".")[2]
            p.tensor.data = rng.child(f"layer{layer}").trunc_normal(p.tensor.shape)
    elif isinstance(spec, SsfSpec):
        for p in registry.params(prefix="ssf."):
            p.tensor.data = np.ones(p.tensor.shape) if p.name.endswith(".gamma") else np.zeros(p.tensor.shape)
    elif isinstance(spec, LoraSpec):
        for i in range(model.cfg.depth):
            brng = rng.child(f"block{i}")
            for target in spec.targets:
                key = _LORA_TARGET_MAP[target]
                registry.get(f"lora.blocks.{i}.{key}.A").tensor.data = (
                    brng.child(f"{key}A").normal((d, spec.rank), std=0.02))
                registry.get(f"lora.blocks.{i}.{key}.B").tensor.data = np.zeros((spec.rank, d))
    elif isinstance(spec, BitFitSpec):
        pass  # biases keep their pre-trained values; "random init" is a no-op here


def merged_lora_weights(model: VisionTransformer) -> dict[str, np.ndarray]:
    """Fold LoRA updates into dense projection weights: W' = W + scaling * A @ B.

    Returns {param_name: merged_weight} for each adapted projection; used to
    check hook-based and merged forwards agree.
    """
    spec = model.peft_spec
    if not isinstance(spec, LoraSpec):
        raise StateError("merged_lora_weights requires an attached LoraSpec")
    registry = model.registry
    out = {}
    for i in range(model.cfg.depth):
        for target in spec.targets:
            key = _LORA_TARGET_MAP[target]
            a = registry.get(f"lora.blocks.{i}.{key}.A").data
            b = registry.get(f"lora.blocks.{i}.{key}.B").data
            w_name = f"{model.prefix}.blocks.{i}.attn.{key}.weight"
            out[w_name] = registry.get(w_name).data + (spec.alpha / spec.rank) * (a @ b)
    return out
