"""Self-supervised objectives for the target-parameter pre-training stage.

Two pretext tasks are provided:

* masked patch reconstruction: hide a fixed fraction of patches, encode
  the visible ones, decode the full sequence with a shared mask token,
  and take the MSE over masked patch pixels only;
* self-distillation: a student matches, through a temperature-scaled
  cross-entropy, the centered and sharpened outputs of a momentum
  teacher over multiple augmented views.

The teacher shares the frozen backbone tensors and keeps EMA copies of
exactly the parameters being trained; it is evaluated with gradient
recording off, so no teacher parameter can ever receive a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .errors import ArgumentError, ShapeError, StateError
from .registry import ParamGroup, ParamRegistry
from .rng import SeededRng
from .tensor import Tensor
from .vit import LayerNorm, Linear, TransformerBlock, VisionTransformer, patchify


# -- masking ---------------------------------------------------------------


def sample_mask(rng: SeededRng, num_patches: int, mask_ratio: float):
    """Split a uniform random permutation of patch indices into (visible, masked).

    Exactly round(mask_ratio * num_patches) indices are masked on every
    draw. Both index arrays come back sorted so downstream gathers keep
    patch order.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ArgumentError(f"mask_ratio must be in (0,1), got {mask_ratio}")
    if num_patches < 2:
        raise ArgumentError(f"need at least 2 patches, got {num_patches}")
    num_masked = round(mask_ratio * num_patches)
    if num_masked == 0 or num_masked == num_patches:
        raise ArgumentError(
            f"mask_ratio {mask_ratio} leaves {'no masked' if num_masked == 0 else 'no visible'} "
            f"patches for N={num_patches}"
        )
    perm = rng.permutation(num_patches)
    masked = np.sort(perm[:num_masked])
    visible = np.sort(perm[num_masked:])
    return visible, masked


# -- masked reconstruction ------------------------------------------------


@dataclass(frozen=True)
class MaeConfig:
    mask_ratio: float = 0.75
    decoder_dim: int = 0          # 0: embed_dim // 2
    decoder_depth: int = 1
    norm_pix_targets: bool = False


def _decoder_heads(dim: int) -> int:
    for h in (4, 2, 1):
        if dim % h == 0:
            return h
    return 1


class MaskedReconstruction:
    """Lightweight decoder over an encoder backbone, trained to fill masked patches.

    Decoder parameters live under ``pretext.mae.*`` with group Head; they
    are stage scaffolding, inheritable across stages but never part of a
    Target-group checkpoint.
    """

    PREFIX = "pretext.mae"

    def __init__(self, model: VisionTransformer, cfg: MaeConfig, rng: SeededRng):
        self.model = model
        self.cfg = cfg
        vit_cfg = model.cfg
        registry = model.registry
        dd = cfg.decoder_dim if cfg.decoder_dim > 0 else vit_cfg.embed_dim // 2
        self.dec_dim = dd
        group = ParamGroup.HEAD
        self.enc2dec = Linear(registry, rng.child("enc2dec"), f"{self.PREFIX}.enc2dec",
                              vit_cfg.embed_dim, dd, group)
        self.mask_token = registry.register(
            f"{self.PREFIX}.mask_token", rng.child("mask_token").trunc_normal((dd,)), group)
        self.dec_pos = registry.register(
            f"{self.PREFIX}.dec_pos",
            rng.child("dec_pos").trunc_normal((vit_cfg.num_patches + 1, dd)), group)
        self.blocks = [
            TransformerBlock(registry, rng.child(f"block{i}"),
                             f"{self.PREFIX}.blocks.{i}", dd, _decoder_heads(dd),
                             dd * 2, group)
            for i in range(cfg.decoder_depth)
        ]
        self.ln = LayerNorm(registry, f"{self.PREFIX}.ln", dd, group)
        self.pred = Linear(registry, rng.child("pred"), f"{self.PREFIX}.pred",
                           dd, vit_cfg.patch_dim, group)

    def reinit(self, rng: SeededRng) -> None:
        """Re-randomize all decoder params (the non-inheritance mode)."""
        for p in self.model.registry.params(prefix=self.PREFIX + "."):
            parts = p.name.split(".")
            is_norm = len(parts) >= 2 and parts[-2] in ("ln", "ln1", "ln2")
            if p.name.endswith(".weight"):
                p.tensor.data = (np.ones(p.tensor.shape) if is_norm
                                 else rng.child(p.name).trunc_normal(p.tensor.shape))
            elif p.name.endswith(".bias"):
                p.tensor.data = np.zeros(p.tensor.shape)
            else:  # mask_token, dec_pos
                p.tensor.data = rng.child(p.name).trunc_normal(p.tensor.shape)

    def loss(self, images: Tensor, rng: SeededRng,
             sample_keys: list[int] | None = None) -> Tensor:
        """One masked-reconstruction loss over a batch of [B,C,H,W] images."""
        pred, targets, mask_bool = self.forward(images, rng, sample_keys)
        return T.mse_masked(pred, targets, mask_bool)

    def forward(self, images: Tensor, rng: SeededRng,
                sample_keys: list[int] | None = None):
        """Predictions, per-patch pixel targets, and the boolean patch mask.

        Mask draws derive per-sample sub-streams keyed by sample_keys
        (dataset indices by default batch position), so parallel batch
        assembly can never change the masks.
        """
        vit_cfg = self.model.cfg
        n = vit_cfg.num_patches
        bsz = images.shape[0]
        keys = sample_keys if sample_keys is not None else list(range(bsz))
        visible_rows = []
        mask_bool = np.zeros((bsz, n), dtype=bool)
        for b in range(bsz):
            vis, masked = sample_mask(rng.child(f"sample{keys[b]}"), n, self.cfg.mask_ratio)
            visible_rows.append(vis)
            mask_bool[b, masked] = True
        vis_idx = np.stack(visible_rows)

        patches = patchify(images, vit_cfg.patch_size)  # [B,N,patch_dim]
        targets = patches.data
        if self.cfg.norm_pix_targets:
            mu = targets.mean(axis=-1, keepdims=True)
            var = targets.var(axis=-1, keepdims=True)
            targets = (targets - mu) / np.sqrt(var + 1e-6)
        targets = Tensor(targets)

        tokens = self.model.patch_embed(patches)
        tokens_vis = T.take_tokens(tokens, vis_idx)
        feats = self.model.forward_features(tokens_vis, patch_index=vis_idx)

        dec = self.enc2dec(feats)  # [B, 1+V, dd]
        nvis = vis_idx.shape[1]
        cls_part = T.narrow(dec, 1, 0, 1)
        vis_part = T.narrow(dec, 1, 1, nvis)
        full = T.scatter_tokens(vis_part, vis_idx, self.mask_token.tensor, n)
        full = T.add(full, T.narrow(self.dec_pos.tensor, 0, 1, n))
        cls_part = T.add(cls_part, T.narrow(self.dec_pos.tensor, 0, 0, 1))
        x = T.concat([cls_part, full], axis=1)
        for block in self.blocks:
            x = block(x)
        x = self.ln(x)
        pred = self.pred(T.narrow(x, 1, 1, n))
        return pred, targets, mask_bool


# -- self-distillation ------------------------------------------------------


@dataclass(frozen=True)
class DinoConfig:
    teacher_momentum: float = 0.996
    center_momentum: float = 0.9
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    head_output_dim: int = 256
    num_global_views: int = 2
    num_local_views: int = 2

    def __post_init__(self):
        if not 0.0 <= self.teacher_momentum < 1.0:
            raise ArgumentError(f"teacher_momentum must be in [0,1), got {self.teacher_momentum}")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ArgumentError(f"center_momentum must be in [0,1), got {self.center_momentum}")
        if self.num_global_views < 2:
            raise ArgumentError("self-distillation needs at least 2 global views")


class ProjectionHead:
    """Two-layer MLP from the class token to the distillation output space.

    Registered under ``pretext.dino_head.*`` with group Target: the head is
    trained during the pretext stage and discarded before fine-tuning.
    """

    PREFIX = "pretext.dino_head"

    def __init__(self, embed_dim: int, out_dim: int, registry: ParamRegistry, rng: SeededRng):
        self.fc1 = Linear(registry, rng.child("fc1"), f"{self.PREFIX}.fc1",
                          embed_dim, embed_dim, ParamGroup.TARGET)
        self.fc2 = Linear(registry, rng.child("fc2"), f"{self.PREFIX}.fc2",
                          embed_dim, out_dim, ParamGroup.TARGET)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def teacher_update(teacher: dict[str, np.ndarray], registry: ParamRegistry, momentum: float) -> None:
    """EMA: every tracked teacher parameter t <- m*t + (1-m)*student."""
    for name in teacher:
        student = registry.get(name).data
        if teacher[name].shape != student.shape:
            raise StateError(f"teacher/student structure mismatch at {name}")
        teacher[name] = momentum * teacher[name] + (1.0 - momentum) * student


def center_update(center: np.ndarray, teacher_outputs: np.ndarray, momentum: float) -> np.ndarray:
    """center <- c*center + (1-c) * batch mean of pre-softmax teacher outputs."""
    return momentum * center + (1.0 - momentum) * teacher_outputs.mean(axis=0)


def dino_loss(student_logits: list[Tensor], teacher_logits: list[np.ndarray],
              center: np.ndarray, cfg: DinoConfig) -> Tensor:
    """Mean cross-entropy over (teacher global view, student view) pairs.

    Teacher probabilities are softmax((t - center)/teacher_temp) with no
    gradient; pairs where the student view index equals the teacher's
    global view index are skipped.
    """
    if cfg.teacher_temp <= 0 or cfg.student_temp <= 0:
        raise ArgumentError("temperatures must be > 0")
    if len(teacher_logits) < 2:
        raise ArgumentError("need at least 2 teacher global views")
    terms = []
    for g, t in enumerate(teacher_logits):
        z = (t - center) / cfg.teacher_temp
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        pt = e / e.sum(axis=-1, keepdims=True)
        for v, s in enumerate(student_logits):
            if v == g:
                continue
            terms.append(T.soft_cross_entropy(pt, s, cfg.student_temp))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.scale(total, 1.0 / len(terms))


class SelfDistillation:
    """Student/teacher pair over one instrumented backbone.

    The teacher holds EMA buffers for every parameter trainable at
    ``init_teacher`` time (the stage's trainable set) and shares all frozen
    tensors with the student. Teacher forwards run with grad recording off
    and the buffers temporarily swapped in.
    """

    def __init__(self, model: VisionTransformer, cfg: DinoConfig, rng: SeededRng):
        self.model = model
        self.cfg = cfg
        self.head = ProjectionHead(model.cfg.embed_dim, cfg.head_output_dim,
                                   model.registry, rng.child("head"))
        self.teacher: dict[str, np.ndarray] | None = None
        self.center = np.zeros(cfg.head_output_dim)

    def init_teacher(self) -> None:
        """Snapshot the current trainable params; call after stage freezing."""
        self.teacher = {
            p.name: p.data.copy()
            for p in self.model.registry.params(trainable=True)
        }

    def student_forward(self, images: Tensor) -> Tensor:
        feats = self.model.forward_images(images)
        bsz, _, d = feats.shape
        cls = T.reshape(T.narrow(feats, 1, 0, 1), (bsz, d))
        return self.head(cls)

    def teacher_forward(self, images: Tensor) -> np.ndarray:
        if self.teacher is None:
            raise StateError("teacher not initialized; call init_teacher() first")
        with self.model.registry.swap(self.teacher), T.no_grad():
            return self.student_forward(images).data

    def step_loss(self, views: list[Tensor]) -> tuple[Tensor, np.ndarray]:
        """Loss over all views plus stacked teacher outputs for the center update."""
        g = self.cfg.num_global_views
        if len(views) < g:
            raise ArgumentError(f"got {len(views)} views, need {g} global views")
        teacher_outs = [self.teacher_forward(views[i]) for i in range(g)]
        student_outs = [self.student_forward(v) for v in views]
        loss = dino_loss(student_outs, teacher_outs, self.center, self.cfg)
        return loss, np.concatenate(teacher_outs, axis=0)

    def after_step(self, teacher_batch_outputs: np.ndarray) -> None:
        teacher_update(self.teacher, self.model.registry, self.cfg.teacher_momentum)
        self.center = center_update(self.center, teacher_batch_outputs,
                                    self.cfg.center_momentum)


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale: tuple[float, float] | None = None
    crop_aspect: tuple[float, float] = (0.75, 4.0 / 3.0)
    hflip_prob: float = 0.0
    brightness: float = 0.0    # multiplicative factor drawn from [1-b, 1+b]
    contrast: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    solarize_prob: float = 0.0
    solarize_threshold: float = 0.5


POLICIES: dict[str, AugmentPolicy] = {
    "none": AugmentPolicy(),
    "dino_global": AugmentPolicy(crop_scale=(0.5, 1.0), hflip_prob=0.5,
                                 brightness=0.2, contrast=0.2,
                                 blur_prob=0.5, solarize_prob=0.2),
    "dino_local": AugmentPolicy(crop_scale=(0.05, 0.5), hflip_prob=0.5,
                                brightness=0.2, contrast=0.2, blur_prob=0.1),
    "finetune_light": AugmentPolicy(crop_scale=(0.8, 1.0), hflip_prob=0.5),
}


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    from .data import bilinear_resize  # local import; data also uses this module's rng
    return bilinear_resize(img, out_h, out_w)


def augment(rng: SeededRng, image: np.ndarray, policy: str | AugmentPolicy) -> np.ndarray:
    """Apply one deterministic augmentation draw to a [C,H,W] image in [0,1].

    policy "none" is the identity. Crops are resized back to the input
    resolution, so local views are smaller-area crops upsampled to full size.
    """
    if isinstance(policy, str):
        try:
            policy = POLICIES[policy]
        except KeyError:
            raise ArgumentError(f"unknown augment policy: {policy!r}") from None
    out = image
    c, h, w = out.shape

    if policy.crop_scale is not None:
        area = rng.uniform(low=policy.crop_scale[0], high=policy.crop_scale[1]) * h * w
        aspect = rng.uniform(low=policy.crop_aspect[0], high=policy.crop_aspect[1])
        ch = int(np.clip(round(np.sqrt(area / aspect)), 1, h))
        cw = int(np.clip(round(np.sqrt(area * aspect)), 1, w))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = _resize_bilinear(out[:, top:top + ch, left:left + cw], h, w)

    if policy.hflip_prob > 0 and rng.random() < policy.hflip_prob:
        out = out[:, :, ::-1].copy()

    if policy.brightness > 0:
        out = out * rng.uniform(low=1 - policy.brightness, high=1 + policy.brightness)

    if policy.contrast > 0:
        factor = rng.uniform(low=1 - policy.contrast, high=1 + policy.contrast)
        mean = out.mean()
        out = (out - mean) * factor + mean

    if policy.blur_prob > 0 and rng.random() < policy.blur_prob:
        sigma = rng.uniform(low=policy.blur_sigma[0], high=policy.blur_sigma[1])
        out = np.stack([gaussian_filter(ch_img, sigma, mode="nearest") for ch_img in out])

    if policy.solarize_prob > 0 and rng.random() < policy.solarize_prob:
        out = solarize(out, policy.solarize_threshold)

    return np.clip(out, 0.0, 1.0) if out is not image else out.copy()


def solarize(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Invert values at or above the threshold."""
    return np.where(image >= threshold, 1.0 - image, image)
