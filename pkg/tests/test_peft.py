"""PEFT mechanisms: identity at init, closed-form counts, gradient isolation."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpp import tensor as T
from tpp.errors import ArgumentError, StateError
from tpp.peft import (AdapterSpec, AdaptFormerSpec, BitFitSpec, LoraSpec,
                      SsfSpec, VptSpec, attach, merged_lora_weights)
from tpp.registry import ParamGroup
from tpp.rng import SeededRng
from tpp.vit import ClassificationSpec, ViTConfig, build_backbone, build_head

TINY = ViTConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2)


def adapter_count(cfg, r):
    return cfg.depth * (2 * cfg.embed_dim * r + r + cfg.embed_dim)


def adaptformer_count(cfg, r):
    return cfg.depth * (2 * cfg.embed_dim * r + r + cfg.embed_dim)


def vpt_count(cfg, tokens, mode):
    layers = cfg.depth if mode == "deep" else 1
    return layers * tokens * cfg.embed_dim


def ssf_count(cfg):
    # modulated outputs per block: ln1, q, k, v, proj, ln2, fc2 (width d) and fc1 (mlp)
    per_block = 2 * (7 * cfg.embed_dim + cfg.mlp_dim)
    return cfg.depth * per_block


def lora_count(cfg, rank, num_targets=2):
    return cfg.depth * num_targets * (2 * cfg.embed_dim * rank)


def _fresh(seed=0, cfg=TINY):
    return build_backbone(cfg, seed=seed)


def _random_images(cfg, n=2, seed=0):
    return np.random.default_rng(seed).random((n, cfg.num_channels, cfg.image_size,
                                               cfg.image_size))


def _baseline_forward(cfg, seed, images):
    model, _ = build_backbone(cfg, seed=seed)
    with T.no_grad():
        return model.forward_images(T.Tensor(images)).data


class TestIdentityAtInit:
    @pytest.mark.parametrize("spec", [
        AdapterSpec(bottleneck=8),
        AdaptFormerSpec(bottleneck=8, scale=0.1),
        AdaptFormerSpec(bottleneck=4, scale=0.0),
        SsfSpec(),
        LoraSpec(rank=4, alpha=4.0),
    ])
    def test_instrumented_forward_equals_baseline_exactly(self, spec):
        images = _random_images(TINY, n=20, seed=11)
        ref = _baseline_forward(TINY, 5, images)
        model, _ = _fresh(seed=5)
        attach(model, spec, SeededRng(5, "init/peft"))
        with T.no_grad():
            out = model.forward_images(T.Tensor(images)).data
        assert np.array_equal(ref, out)

    def test_vpt_zero_prompts_still_change_the_output(self):
        # attention renormalizes over the extra keys even for zero prompts
        images = _random_images(TINY, n=4, seed=12)
        ref = _baseline_forward(TINY, 5, images)
        model, reg = _fresh(seed=5)
        attach(model, VptSpec(num_tokens=4, mode="deep"), SeededRng(5, "init/peft"))
        for p in reg.params(prefix="vpt."):
            p.tensor.data = np.zeros_like(p.data)
        with T.no_grad():
            out = model.forward_images(T.Tensor(images)).data
        assert out.shape == ref.shape
        assert not np.array_equal(ref, out)

    def test_bitfit_changes_nothing_at_attach(self):
        images = _random_images(TINY, n=3, seed=13)
        ref = _baseline_forward(TINY, 5, images)
        model, _ = _fresh(seed=5)
        attach(model, BitFitSpec(), SeededRng(5, "init/peft"))
        with T.no_grad():
            out = model.forward_images(T.Tensor(images)).data
        assert np.array_equal(ref, out)


class TestCounts:
    def test_adapter_count_example(self):
        cfg = ViTConfig(image_size=32, patch_size=8, embed_dim=64, depth=4, num_heads=4)
        model, reg = build_backbone(cfg, seed=0)
        attach(model, AdapterSpec(bottleneck=8), SeededRng(0, "init/peft"))
        assert reg.count(group=ParamGroup.TARGET) == 4 * (2 * 64 * 8 + 8 + 64) == 4384

    def test_lora_count_formula(self):
        model, reg = _fresh()
        attach(model, LoraSpec(rank=4), SeededRng(0, "init/peft"))
        assert reg.count(group=ParamGroup.TARGET) == lora_count(TINY, 4)

    def test_bitfit_adds_zero_new_params_and_flips_biases(self):
        model, reg = _fresh()
        before_total = reg.count()
        before_names = set(reg.names())
        attach(model, BitFitSpec(), SeededRng(0, "init/peft"))
        assert reg.count() == before_total
        assert set(reg.names()) == before_names
        target = reg.params(group=ParamGroup.TARGET)
        assert target and all(p.name.endswith(".bias") for p in target)
        assert all(p.trainable for p in target)

    @pytest.mark.parametrize("make_spec,formula", [
        (lambda r: AdapterSpec(bottleneck=r), adapter_count),
        (lambda r: AdaptFormerSpec(bottleneck=r), adaptformer_count),
    ])
    def test_bottleneck_counts(self, make_spec, formula):
        for r in (1, 3, 8):
            model, reg = _fresh(seed=r)
            attach(model, make_spec(r), SeededRng(r, "init/peft"))
            assert reg.count(group=ParamGroup.TARGET) == formula(TINY, r)

    def test_vpt_deep_count(self):
        model, reg = _fresh()
        attach(model, VptSpec(num_tokens=7, mode="deep"), SeededRng(0, "init/peft"))
        assert reg.count(group=ParamGroup.TARGET) == vpt_count(TINY, 7, "deep")

    def test_ssf_count(self):
        model, reg = _fresh()
        attach(model, SsfSpec(), SeededRng(0, "init/peft"))
        assert reg.count(group=ParamGroup.TARGET) == ssf_count(TINY)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 8),
           st.sampled_from(["adapter", "adaptformer", "vpt", "ssf", "lora"]))
    def test_property_counts_over_random_configs(self, heads, depth, r, method):
        d = 8 * heads
        cfg = ViTConfig(image_size=16, patch_size=8, embed_dim=d, depth=depth,
                        num_heads=heads)
        model, reg = build_backbone(cfg, seed=depth)
        spec = {
            "adapter": AdapterSpec(bottleneck=r),
            "adaptformer": AdaptFormerSpec(bottleneck=r),
            "vpt": VptSpec(num_tokens=r, mode="deep"),
            "ssf": SsfSpec(),
            "lora": LoraSpec(rank=min(r, d)),
        }[method]
        attach(model, spec, SeededRng(0, "init/peft"))
        expected = {
            "adapter": adapter_count(cfg, r),
            "adaptformer": adaptformer_count(cfg, r),
            "vpt": vpt_count(cfg, r, "deep"),
            "ssf": ssf_count(cfg),
            "lora": lora_count(cfg, min(r, d)),
        }[method]
        assert reg.count(group=ParamGroup.TARGET) == expected


class TestGradientIsolation:
    @pytest.mark.parametrize("spec", [
        AdapterSpec(bottleneck=4),
        AdaptFormerSpec(bottleneck=4),
        VptSpec(num_tokens=3, mode="deep"),
        SsfSpec(),
        LoraSpec(rank=2),
    ])
    def test_only_target_and_head_receive_gradients(self, spec):
        model, reg = _fresh(seed=7)
        attach(model, spec, SeededRng(7, "init/peft"))
        head = build_head(TINY, ClassificationSpec(2), reg, SeededRng(7, "init/head"))
        reg.set_group_trainable(ParamGroup.BACKBONE, False)
        images = T.Tensor(_random_images(TINY, n=4, seed=8))
        loss = T.cross_entropy(head(model.forward_images(images)), np.array([0, 1, 1, 0]))
        T.backward(loss)
        with_grad = {p.name for p in reg if p.tensor.grad is not None}
        expected = {p.name for p in reg if p.group in (ParamGroup.TARGET, ParamGroup.HEAD)}
        assert with_grad == expected
        assert all(p.tensor.grad is None for p in reg.params(group=ParamGroup.BACKBONE))

    def test_bitfit_gradients_cover_biases_and_head(self):
        model, reg = _fresh(seed=7)
        attach(model, BitFitSpec(), SeededRng(7, "init/peft"))
        head = build_head(TINY, ClassificationSpec(2), reg, SeededRng(7, "init/head"))
        reg.set_group_trainable(ParamGroup.BACKBONE, False)
        images = T.Tensor(_random_images(TINY, n=2, seed=9))
        loss = T.cross_entropy(head(model.forward_images(images)), np.array([0, 1]))
        T.backward(loss)
        with_grad = {p.name for p in reg if p.tensor.grad is not None}
        expected = {p.name for p in reg
                    if p.group in (ParamGroup.TARGET, ParamGroup.HEAD)}
        assert with_grad == expected

    def test_adapter_diverges_from_baseline_after_one_step(self):
        from tpp.optim import AdamW
        model, reg = _fresh(seed=7)
        attach(model, AdapterSpec(bottleneck=2), SeededRng(7, "init/peft"))
        head = build_head(TINY, ClassificationSpec(2), reg, SeededRng(7, "init/head"))
        reg.set_group_trainable(ParamGroup.BACKBONE, False)
        images = _random_images(TINY, n=4, seed=10)
        ref = _baseline_forward(TINY, 7, images)
        opt = AdamW(reg.params(trainable=True))
        loss = T.cross_entropy(head(model.forward_images(T.Tensor(images))),
                               np.array([0, 1, 1, 0]))
        T.backward(loss)
        opt.step(lr=0.05)
        opt.zero_grad()
        T.clear_tape()
        up = reg.get("adapter.blocks.0.up.weight").data
        assert not np.array_equal(up, np.zeros_like(up))
        with T.no_grad():
            out = model.forward_images(T.Tensor(images)).data
        assert not np.array_equal(ref, out)


class TestLora:
    def test_alpha_equal_rank_gives_unit_scaling(self):
        model, _ = _fresh()
        attach(model, LoraSpec(rank=4, alpha=4.0), SeededRng(0, "init/peft"))
        assert model.blocks[0].lora["q"][2] == 1.0

    def test_merged_weights_match_hooked_forward(self):
        model, reg = _fresh(seed=3)
        attach(model, LoraSpec(rank=2, alpha=8.0), SeededRng(3, "init/peft"))
        # train-like perturbation so B is nonzero
        for p in reg.params(prefix="lora."):
            p.tensor.data = p.data + 0.01 * np.random.default_rng(4).standard_normal(p.data.shape)
        images = _random_images(TINY, n=3, seed=5)
        with T.no_grad():
            hooked = model.forward_images(T.Tensor(images)).data
        merged = merged_lora_weights(model)
        plain, reg2 = _fresh(seed=3)
        state = {p.name: reg.get(p.name).data.copy() for p in reg2}
        state.update(merged)
        reg2.load_state(state)
        with T.no_grad():
            dense = plain.forward_images(T.Tensor(images)).data
        assert np.max(np.abs(hooked - dense)) < 1e-10

    def test_rank_larger_than_dim_rejected(self):
        model, _ = _fresh()
        with pytest.raises(ArgumentError):
            attach(model, LoraSpec(rank=64), SeededRng(0, "init/peft"))


class TestAttachmentRules:
    def test_double_attachment_rejected(self):
        model, _ = _fresh()
        attach(model, AdapterSpec(), SeededRng(0, "init/peft"))
        with pytest.raises(StateError):
            attach(model, SsfSpec(), SeededRng(0, "init/peft"))

    def test_target_names_carry_mechanism_prefix(self):
        for spec, prefix in [(AdapterSpec(), "adapter."), (AdaptFormerSpec(), "adaptformer."),
                             (VptSpec(), "vpt."), (SsfSpec(), "ssf."), (LoraSpec(), "lora.")]:
            model, reg = _fresh()
            attach(model, spec, SeededRng(0, "init/peft"))
            for p in reg.params(group=ParamGroup.TARGET):
                assert p.name.startswith(prefix), p.name

    def test_vpt_block_zero_sees_prompt_extended_sequence(self):
        model, _ = _fresh()
        attach(model, VptSpec(num_tokens=5, mode="deep"), SeededRng(0, "init/peft"))
        with T.no_grad():
            model.forward_images(T.Tensor(_random_images(TINY)))
        n = TINY.num_patches
        assert model.last_block_input_lengths[0] == 1 + 5 + n
        assert all(length == 1 + 5 + n for length in model.last_block_input_lengths)

    def test_invalid_hyperparameters_rejected(self):
        for spec in (AdapterSpec(bottleneck=0), VptSpec(num_tokens=0),
                     LoraSpec(rank=0), VptSpec(mode="sideways")):
            model, _ = _fresh()
            with pytest.raises(ArgumentError):
                attach(model, spec, SeededRng(0, "init/peft"))
