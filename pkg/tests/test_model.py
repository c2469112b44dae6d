"""Model-component tests: fusion, trunk, alignment layers, encode, VQA head."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import unialign.autodiff as ad
import unialign.model as model
from unialign.autodiff import Tensor, grad_check
from unialign.errors import (
    ConfigurationError,
    DuplicateModalityError,
    ModalityError,
    SequenceError,
)
from unialign.loss import cross_entropy
from unialign.model import (
    AlignmentLayer,
    ModalityRegistry,
    ModalityToken,
    ModelState,
    PredictionHead,
    UniversalProjection,
    UPConfig,
    encode,
    fuse,
    parameter_count,
    pool_embed,
    vqa_forward,
)
from unialign.rng import RngStream


def small_state(fusion="addition", dim=8, depth=1, heads=2, token_count=1,
                seed=0):
    config = UPConfig(dim=dim, depth=depth, heads=heads, mlp_ratio=2,
                      fusion=fusion, token_count=token_count)
    return ModelState.create(config, ("image", "text"), seed=seed)


class TestUPConfig:
    def test_dim_must_divide_heads(self):
        with pytest.raises(ConfigurationError):
            UPConfig(dim=10, heads=4)

    @pytest.mark.parametrize("kwargs", [
        {"depth": 0}, {"mlp_ratio": 0}, {"fusion": "stacking"},
        {"token_count": 0}, {"fusion": "addition", "token_count": 2},
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigurationError):
            UPConfig(**kwargs)


class TestFuse:
    def test_addition_with_zero_token_is_identity(self):
        token = ModalityToken("image", dim=4, count=1, rng=RngStream(0))
        token.tokens.data[...] = 0.0
        x = RngStream(1).normal((3, 4))
        out = fuse(token, x, "addition")
        np.testing.assert_array_equal(out.data, x)

    def test_concatenation_prepends_tokens(self):
        token = ModalityToken("image", dim=4, count=1, rng=RngStream(0))
        x = RngStream(1).normal((4, 4))
        out = fuse(token, x, "concatenation")
        assert out.shape == (5, 4)
        np.testing.assert_array_equal(out.data[0], token.tokens.data[0])
        np.testing.assert_array_equal(out.data[1:], x)

    def test_cross_attention_single_key_returns_that_token(self):
        token = ModalityToken("image", dim=4, count=1, rng=RngStream(0))
        x = RngStream(1).normal((1, 4))
        out = fuse(token, x, "cross_attention")
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_addition_with_multiple_tokens_rejected(self):
        token = ModalityToken("image", dim=4, count=2, rng=RngStream(0))
        with pytest.raises(ConfigurationError):
            fuse(token, np.zeros((3, 4)), "addition")

    def test_empty_sequence_rejected(self):
        token = ModalityToken("image", dim=4, count=1, rng=RngStream(0))
        with pytest.raises(SequenceError):
            fuse(token, np.zeros((0, 4)), "addition")

    @given(st.integers(1, 7), st.integers(1, 3), st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_fusion_mode_output_lengths(self, length, count, seed):
        token = ModalityToken("m", dim=4, count=count, rng=RngStream(seed))
        x = RngStream(seed + 1).normal((length, 4))
        assert fuse(token, x, "concatenation").shape == (count + length, 4)
        assert fuse(token, x, "cross_attention").shape == (count, 4)
        if count == 1:
            assert fuse(token, x, "addition").shape == (length, 4)

    def test_batched_inputs_match_per_sample(self):
        token = ModalityToken("m", dim=6, count=1, rng=RngStream(3))
        x = RngStream(4).normal((5, 3, 6))
        for mode in ("addition", "concatenation", "cross_attention"):
            batched = fuse(token, x, mode).data
            for i in range(5):
                single = fuse(token, x[i], mode).data
                np.testing.assert_allclose(batched[i], single, atol=1e-12)


class TestUniversalProjection:
    @pytest.mark.parametrize("length", [1, 5, 17])
    def test_output_shape_equals_input_shape(self, length):
        up = UniversalProjection(UPConfig(dim=8, depth=2, heads=2),
                                 RngStream(0))
        x = RngStream(1).normal((length, 8))
        assert up.forward(Tensor(x)).shape == (length, 8)

    def test_frozen_trunk_is_bit_deterministic(self):
        up = UniversalProjection(UPConfig(dim=8, depth=2, heads=2),
                                 RngStream(0))
        up.freeze()
        x = RngStream(1).normal((4, 8))
        first = up.forward(Tensor(x)).data.tobytes()
        second = up.forward(Tensor(x)).data.tobytes()
        assert first == second

    def test_dimension_mismatch_rejected(self):
        up = UniversalProjection(UPConfig(dim=8, depth=1, heads=2),
                                 RngStream(0))
        with pytest.raises(ConfigurationError):
            up.forward(Tensor(np.zeros((3, 6))))

    def test_gradient_of_mean_output(self):
        up = UniversalProjection(
            UPConfig(dim=4, depth=2, heads=2, mlp_ratio=2), RngStream(2))
        x = RngStream(3).normal((3, 4))
        params = [p for _, p in up.named_parameters()]
        err = grad_check(lambda: ad.tensor_mean(up.forward(Tensor(x))), params,
                         max_entries_per_param=4)
        assert err < 1e-4

    @pytest.mark.parametrize("config", [
        UPConfig(dim=16, depth=3, heads=4, mlp_ratio=2),
        UPConfig(dim=64, depth=2, heads=4),
        UPConfig(dim=24, depth=1, heads=2, mlp_ratio=3),
    ])
    def test_parameter_count_matches_closed_form(self, config):
        up = UniversalProjection(config, RngStream(0))
        actual = sum(p.data.size for _, p in up.named_parameters())
        assert actual == parameter_count(config)


class TestAlignmentLayer:
    def test_zero_weights_give_zero_output(self):
        layer = AlignmentLayer("audio", dim=4, rng=RngStream(0))
        for p in (layer.w1, layer.b1, layer.w2, layer.b2):
            p.data[...] = 0.0
        out = layer.forward(np.ones((3, 4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_rows_are_independent_and_permutation_equivariant(self):
        layer = AlignmentLayer("audio", dim=6, rng=RngStream(1))
        x = RngStream(2).normal((3, 6))
        out = layer.forward(x).data
        perm = [2, 0, 1]
        permuted = layer.forward(x[perm]).data
        np.testing.assert_array_equal(permuted, out[perm])

    def test_gradients(self):
        layer = AlignmentLayer("audio", dim=4, rng=RngStream(3))
        x = RngStream(4).normal((2, 4))
        params = [p for _, p in layer.named_parameters()]
        err = grad_check(lambda: ad.tensor_sum(layer.forward(x)), params)
        assert err < 1e-4

    def test_identity_construction_is_exact_identity(self):
        layer = AlignmentLayer.identity("audio", dim=5)
        x = RngStream(5).normal((4, 5), scale=2.0)
        np.testing.assert_allclose(layer.forward(x).data, x, atol=1e-10)

    def test_dimension_mismatch_rejected(self):
        layer = AlignmentLayer("audio", dim=4, rng=RngStream(0))
        with pytest.raises(ConfigurationError):
            layer.forward(np.zeros((2, 5)))


class TestPoolEmbed:
    def test_single_token(self):
        out = pool_embed(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-15)

    def test_duplicate_tokens_pool_like_one(self):
        row = RngStream(6).normal((1, 5))
        once = pool_embed(Tensor(row)).data
        twice = pool_embed(Tensor(np.vstack([row, row]))).data
        np.testing.assert_allclose(once, twice, atol=1e-12)

    def test_matches_mean_then_normalize_oracle(self):
        x = RngStream(7).normal((4, 6))
        mean = [sum(x[i][d] for i in range(4)) / 4.0 for d in range(6)]
        norm = sum(v * v for v in mean) ** 0.5
        want = [v / norm for v in mean]
        np.testing.assert_allclose(pool_embed(Tensor(x)).data, want, atol=1e-12)

    def test_empty_sequence_rejected(self):
        with pytest.raises(SequenceError):
            pool_embed(Tensor(np.zeros((0, 4))))


class TestEncode:
    def test_stage1_modality_never_touches_alignment_layer(self, monkeypatch):
        state = small_state()
        state.add_modality("audio", seed=9)
        calls = []
        original = AlignmentLayer.forward

        def tracked(self, x):
            calls.append(self.modality)
            return original(self, x)

        monkeypatch.setattr(AlignmentLayer, "forward", tracked)
        encode(state, "image", RngStream(1).normal((3, 8)))
        assert calls == []
        encode(state, "audio", RngStream(1).normal((3, 8)))
        assert calls == ["audio"]

    def test_identity_alignment_layer_matches_stage1_path(self):
        state = small_state()
        x = RngStream(2).normal((3, 8))
        as_stage1 = encode(state, "image", x).data

        state.registry.aligned.append("audio")
        state.tokens["audio"] = state.tokens["image"]
        state.alignment["audio"] = AlignmentLayer.identity("audio", dim=8)
        via_identity_al = encode(state, "audio", x).data
        np.testing.assert_allclose(via_identity_al, as_stage1, atol=1e-10)

    def test_output_is_unit_norm_for_every_modality(self):
        state = small_state(fusion="cross_attention")
        state.add_modality("audio", seed=5)
        for modality in ("image", "text", "audio"):
            emb = encode(state, modality, RngStream(3).normal((4, 8))).data
            assert abs(np.linalg.norm(emb) - 1.0) < 1e-10

    def test_unregistered_modality_rejected(self):
        state = small_state()
        with pytest.raises(ModalityError, match="registry"):
            encode(state, "video", np.zeros((2, 8)))

    def test_missing_alignment_layer_rejected(self):
        state = small_state()
        state.registry.aligned.append("audio")
        state.tokens["audio"] = ModalityToken("audio", 8, 1, RngStream(0))
        with pytest.raises(ConfigurationError):
            encode(state, "audio", np.zeros((2, 8)))

    def test_encode_does_not_mutate_features(self):
        state = small_state()
        x = RngStream(4).normal((3, 8))
        x.setflags(write=False)  # read-only input must be accepted untouched
        copy = x.copy()
        encode(state, "image", x)
        np.testing.assert_array_equal(x, copy)

    def test_changing_only_the_token_changes_the_output(self):
        state = small_state()
        x = RngStream(5).normal((3, 8))
        first = encode(state, "image", x).data
        state.tokens["image"] = ModalityToken("image", 8, 1, RngStream(99))
        second = encode(state, "image", x).data
        assert np.linalg.norm(first - second) > 1e-6


class TestRegistry:
    def test_add_duplicate_rejected(self):
        registry = ModalityRegistry(stage1_pair=("image", "text"))
        with pytest.raises(DuplicateModalityError):
            registry.add("image")

    def test_stage1_pair_must_be_distinct(self):
        with pytest.raises(ConfigurationError):
            ModalityRegistry(stage1_pair=("image", "image"))


class TestVqaForward:
    def test_zero_head_weights_give_bias_logits(self):
        state = small_state()
        head = PredictionHead("vqa", dim=8, vocabulary=("a", "b", "c"),
                              rng=RngStream(1))
        head.weight.data[...] = 0.0
        head.bias.data[...] = [0.5, -1.0, 2.0]
        logits = vqa_forward(state, RngStream(2).normal((3, 8)),
                             RngStream(3).normal((2, 8)), head)
        np.testing.assert_allclose(logits.data, [0.5, -1.0, 2.0], atol=1e-12)

    @pytest.mark.parametrize("vocab_size", [2, 10])
    def test_logit_length_matches_vocabulary(self, vocab_size):
        state = small_state()
        head = PredictionHead("vqa", dim=8,
                              vocabulary=[f"a{i}" for i in range(vocab_size)],
                              rng=RngStream(1))
        logits = vqa_forward(state, np.ones((2, 8)), np.ones((3, 8)), head)
        assert logits.shape == (vocab_size,)

    def test_empty_vocabulary_rejected(self):
        with pytest.raises(ConfigurationError):
            PredictionHead("vqa", dim=8, vocabulary=())

    def test_cross_entropy_gradient_respects_frozen_flags(self):
        state = small_state(dim=4, heads=2)
        head = PredictionHead("vqa", dim=4, vocabulary=("a", "b"),
                              rng=RngStream(1))
        state.heads["vqa"] = head
        img = RngStream(2).normal((2, 2, 4))
        q = RngStream(3).normal((2, 2, 4))
        state.tokens["text"].tokens.freeze()

        def objective():
            logits = vqa_forward(state, img, q, head)
            return cross_entropy(logits, [0, 1])

        params = [p for _, p in state.named_parameters()]
        err = grad_check(objective, params, max_entries_per_param=4)
        assert err < 1e-4
        np.testing.assert_array_equal(state.tokens["text"].tokens.grad, 0.0)


def test_state_parameter_names_are_unique_and_canonical():
    state = small_state()
    state.add_modality("audio", seed=1)
    state.heads["vqa"] = PredictionHead("vqa", 8, ("x", "y"), RngStream(2))
    names = [n for n, _ in state.named_parameters()]
    assert len(names) == len(set(names))
    assert names[-1] == "temperature.log_tau"
    assert any(n.startswith("up.blocks.0.") for n in names)
    assert "token.audio" in names and "al.audio.w1" in names
