"""LoRA: identity at init, merge equivalence, freezing, parameter accounting."""

import numpy as np
import pytest

from patchlm import lora as lo
from patchlm import model as M
from patchlm import tensor as T
from patchlm.errors import ConfigError, ContractError
from patchlm.lora import LoraConfig
from patchlm.model import ModelConfig, SequenceBuilder, init_params


@pytest.fixture
def small():
    cfg = ModelConfig(hidden=16, n_heads=2, n_layers=2, vocab=64, max_seq=128)
    return cfg, init_params(cfg, np.random.default_rng(21))


def a_sequence(rng):
    return SequenceBuilder().add_patch(rng.standard_normal(2700)).add_tokens([1, 4, 9]).build()


def randomize_adapters(adapted, rng, scale=0.05):
    for name, (a, b) in adapted.pairs.items():
        b.data = rng.normal(0.0, scale, size=b.shape)


class TestAttach:
    def test_fresh_adapter_is_bit_identical(self, small, rng):
        cfg, params = small
        seq = a_sequence(rng)
        base_logits = M.forward(seq, params).data
        adapted = lo.attach(params, LoraConfig(r=4), np.random.default_rng(0))
        assert np.array_equal(M.forward(seq, params, adapters=adapted).data, base_logits)

    def test_trainable_count_matches_closed_form(self, small):
        cfg, params = small
        lcfg = LoraConfig(r=4)
        adapted = lo.attach(params, lcfg, np.random.default_rng(0))
        expected = sum(
            lcfg.r * (params[t].shape[0] + params[t].shape[1])
            for t in lcfg.resolve_targets(cfg)
        )
        assert adapted.trainable_param_count() == expected == lo.adapter_param_count(cfg, lcfg)

    def test_default_config_count_oracle(self):
        # default toy model, default LoRA targets (incl. patch projection)
        cfg = ModelConfig()
        lcfg = LoraConfig()
        per_qkvo = 32 * (128 + 128)
        per_layer = 4 * per_qkvo + 32 * (128 + 512) + 32 * (512 + 128)
        expected = 4 * per_layer + 32 * (128 + 512) + 32 * (2700 + 128)
        assert lo.adapter_param_count(cfg, lcfg) == expected == 405_888

    def test_unknown_target_lists_valid_names(self, small):
        cfg, params = small
        with pytest.raises(ConfigError, match="output_head.weight"):
            lo.attach(params, LoraConfig(targets=("nonexistent.weight",)), np.random.default_rng(0))

    def test_base_frozen_after_attach(self, small):
        cfg, params = small
        lo.attach(params, LoraConfig(r=2), np.random.default_rng(0))
        assert not any(t.requires_grad for t in params.tensors.values())

    def test_exclude_patch_projection(self, small):
        cfg, params = small
        adapted = lo.attach(
            params, LoraConfig(r=2, include_patch_projection=False), np.random.default_rng(0)
        )
        assert "patch_projection.weight" not in adapted.pairs
        assert "output_head.weight" in adapted.pairs


class TestMerge:
    def test_merge_zero_b_unchanged(self, small):
        cfg, params = small
        adapted = lo.attach(params, LoraConfig(r=4), np.random.default_rng(0))
        merged = lo.merge(adapted)
        for name, t in params.tensors.items():
            assert np.array_equal(merged[name].data, t.data), name

    def test_merged_matches_adapted_logits(self, small, rng):
        cfg, params = small
        adapted = lo.attach(params, LoraConfig(r=4), np.random.default_rng(3))
        randomize_adapters(adapted, np.random.default_rng(4))
        seq = a_sequence(rng)
        adapted_logits = M.forward(seq, params, adapters=adapted).data
        merged_logits = M.forward(seq, lo.merge(adapted)).data
        assert np.max(np.abs(adapted_logits - merged_logits)) < 1e-9

    def test_merge_is_once_only(self, small):
        cfg, params = small
        adapted = lo.attach(params, LoraConfig(r=2), np.random.default_rng(0))
        lo.merge(adapted)
        with pytest.raises(ContractError):
            lo.merge(adapted)


class TestScalingAndGrads:
    def test_doubling_alpha_doubles_map_delta(self, small, rng):
        # the adapted map's own delta is (alpha/r) * B(Ax): exactly linear in alpha
        cfg, params = small
        x = rng.standard_normal((5, cfg.hidden))
        deltas = []
        for alpha in (8.0, 16.0):
            adapted = lo.attach(params, LoraConfig(r=4, alpha=alpha), np.random.default_rng(7))
            randomize_adapters(adapted, np.random.default_rng(8))
            a, b = adapted.pairs["output_head.weight"]
            deltas.append(adapted.scaling * (x @ a.data.T) @ b.data.T)
        assert np.array_equal(deltas[1], 2.0 * deltas[0])

    def test_doubling_alpha_doubles_logit_delta_head_only(self, small, rng):
        # with only the (final, linear) head adapted the logit delta is linear too
        cfg, params = small
        seq = a_sequence(rng)
        base = M.forward(seq, params).data
        deltas = []
        for alpha in (8.0, 16.0):
            adapted = lo.attach(
                params,
                LoraConfig(r=4, alpha=alpha, targets=("output_head.weight",)),
                np.random.default_rng(7),
            )
            randomize_adapters(adapted, np.random.default_rng(8))
            deltas.append(M.forward(seq, params, adapters=adapted).data - base)
        assert np.allclose(deltas[1], 2.0 * deltas[0], rtol=1e-12, atol=1e-13)

    def test_base_grads_zero_adapter_grads_match_fd(self, small, rng):
        cfg, params = small
        adapted = lo.attach(params, LoraConfig(r=2), np.random.default_rng(1))
        randomize_adapters(adapted, np.random.default_rng(2))
        seq = a_sequence(rng)
        targets = np.array([0, 1, 4, 9])
        mask = np.array([False, True, True, True])

        def loss():
            return T.cross_entropy(M.forward(seq, params, adapters=adapted), targets, mask)

        trainable = adapted.trainable_tensors()
        report = T.grad_check(
            loss, trainable, tol=1e-5, max_coords_per_param=3, rng=np.random.default_rng(5)
        )
        assert report.passed, str(report)
        loss().backward()
        assert all(t.grad is None for t in params.tensors.values())

    def test_adapter_fraction_small_at_reference_scale(self):
        # r=32 adapters are a tiny fraction of a full-scale decoder
        big = ModelConfig(hidden=4096, n_heads=64, n_layers=36, vocab=262144, max_seq=16384)
        frac = lo.adapter_param_count(big, LoraConfig()) / M.count_params(big)
        assert frac < 0.15


class TestAdapterCheckpoints:
    def test_roundtrip_onto_matching_base(self, small, rng, tmp_path):
        cfg, params = small
        adapted = lo.attach(params, LoraConfig(r=4), np.random.default_rng(3))
        randomize_adapters(adapted, np.random.default_rng(4))
        seq = a_sequence(rng)
        want = M.forward(seq, params, adapters=adapted).data
        path = tmp_path / "ad.plm"
        lo.save_adapters(adapted, path)
        loaded = lo.load_adapters(path, params)
        got = M.forward(seq, params, adapters=loaded).data
        assert np.array_equal(want, got)

    def test_mismatched_base_rejected(self, small, tmp_path):
        cfg, params = small
        adapted = lo.attach(params, LoraConfig(r=2), np.random.default_rng(0))
        path = tmp_path / "ad.plm"
        lo.save_adapters(adapted, path)
        other = init_params(
            ModelConfig(hidden=32, n_heads=2, n_layers=2, vocab=64, max_seq=128),
            np.random.default_rng(9),
        )
        with pytest.raises(ConfigError):
            lo.load_adapters(path, other)

    def test_fingerprint_detects_any_change(self, small):
        cfg, params = small
        fp = lo.params_fingerprint(params)
        assert fp == lo.params_fingerprint(params)
        params.tensors["output_head.weight"].data = params["output_head.weight"].data + 1e-12
        assert fp != lo.params_fingerprint(params)
