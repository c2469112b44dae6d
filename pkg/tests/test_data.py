"""Data-layer tests: synthetic worlds, feature files, manifests, batching."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unialign.data import (
    FrozenEncoder,
    ModalitySpec,
    PairedDataset,
    SyntheticWorldConfig,
    batch_iter,
    class_anchors,
    assign_classes,
    load_features,
    load_labeled_dataset,
    load_manifest,
    load_paired_dataset,
    load_vqa_dataset,
    prompt_features,
    save_features,
    save_manifest,
    synth_vqa_world,
    synth_world,
)
from unialign.errors import (
    BatchError,
    ConfigurationError,
    CorruptionError,
    FormatError,
    VersionError,
)
from unialign.rng import RngStream

from oracles import spearman_rank_correlation


def two_modality_world(noise=0.0, seeds=(11, 22), shapes=((4, 8), (3, 8))):
    return SyntheticWorldConfig(
        latent_dim=6,
        modalities=(
            ModalitySpec("alpha", shapes[0][0], shapes[0][1], seeds[0]),
            ModalitySpec("beta", shapes[1][0], shapes[1][1], seeds[1]),
        ),
        noise_std=noise,
    )


class TestSynthWorld:
    def test_same_seed_is_bit_identical(self):
        config = two_modality_world()
        first = synth_world(config, 10, seed=5)
        second = synth_world(config, 10, seed=5)
        for m in first.modalities:
            assert first.features[m].tobytes() == second.features[m].tobytes()

    def test_identical_encoder_seeds_give_identical_features(self):
        config = two_modality_world(noise=0.0, seeds=(7, 7),
                                    shapes=((4, 8), (4, 8)))
        world = synth_world(config, 8, seed=1)
        np.testing.assert_array_equal(world.features["alpha"],
                                      world.features["beta"])

    def test_encoders_preserve_latent_neighborhood_structure(self):
        config = two_modality_world()
        world = synth_world(config, 32, seed=9)
        z = world.latents
        latent_d, feature_d = [], []
        for m in world.modalities:
            feats = world.features[m].reshape(32, -1)
            for i in range(32):
                for j in range(i + 1, 32):
                    latent_d.append(float(np.linalg.norm(z[i] - z[j])))
                    feature_d.append(float(np.linalg.norm(feats[i] - feats[j])))
        rho = spearman_rank_correlation(latent_d, feature_d)
        assert rho > 0.5

    def test_splits_share_encoders_but_not_latents(self):
        config = two_modality_world()
        train = synth_world(config, 8, seed=1)
        val = synth_world(config, 8, seed=2)
        assert train.latents.tobytes() != val.latents.tobytes()
        enc = FrozenEncoder.synthetic(config.modalities[0], config.latent_dim)
        np.testing.assert_array_equal(enc.encode(train.latents),
                                      train.features["alpha"])
        np.testing.assert_array_equal(enc.encode(val.latents),
                                      val.features["alpha"])

    def test_labeled_world_uses_shared_anchors_across_splits(self):
        config = SyntheticWorldConfig(
            latent_dim=6,
            modalities=(ModalitySpec("alpha", 2, 8, 1),),
            class_count=4)
        train = synth_world(config, 16, seed=1, anchor_seed=0)
        anchors = class_anchors(4, 6, 0)
        want = [f"class_{i}" for i in assign_classes(train.latents, anchors)]
        assert list(train.labels) == want


class TestFrozenEncoder:
    def test_weights_are_read_only(self):
        enc = FrozenEncoder.synthetic(ModalitySpec("a", 2, 4, 3), 6)
        with pytest.raises(ValueError):
            enc.weights[0][0, 0] = 1.0

    def test_reconstruction_is_byte_identical(self):
        spec = ModalitySpec("a", 2, 4, 3)
        first = FrozenEncoder.synthetic(spec, 6)
        second = FrozenEncoder.synthetic(spec, 6)
        assert first.parameter_bytes() == second.parameter_bytes()

    def test_output_shape(self):
        enc = FrozenEncoder.synthetic(ModalitySpec("a", 3, 5, 3), 6)
        assert enc.encode(np.zeros(6)).shape == (3, 5)
        assert enc.encode(np.zeros((7, 6))).shape == (7, 3, 5)


class TestFeatureFiles:
    def test_round_trip_is_bit_identical(self, tmp_path):
        feats = RngStream(1).normal((3, 4, 6)).astype(np.float32)
        path = tmp_path / "x.oeft"
        save_features(path, "audio", feats)
        back = load_features(path)
        assert back.modality == "audio"
        assert back.features.astype(np.float32).tobytes() == feats.tobytes()

    def test_empty_record_list_round_trips(self, tmp_path):
        path = tmp_path / "empty.oeft"
        save_features(path, "audio", np.zeros((0, 4, 6)))
        back = load_features(path)
        assert len(back) == 0

    def test_header_record_count_mismatch_detected(self, tmp_path):
        path = tmp_path / "x.oeft"
        save_features(path, "m", np.zeros((4, 2, 2)))
        raw = bytearray(path.read_bytes())
        # count field sits right after magic+version+name; bump 4 -> 5
        offset = 4 + 2 + 2 + 1
        assert raw[offset] == 4
        raw[offset] = 5
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            load_features(path)

    def test_truncated_file_reports_offset(self, tmp_path):
        path = tmp_path / "x.oeft"
        save_features(path, "m", np.zeros((2, 2, 2)))
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 5])
        with pytest.raises(CorruptionError) as excinfo:
            load_features(path)
        assert excinfo.value.offset is not None

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.oeft"
        save_features(path, "m", np.zeros((1, 2, 2)))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_features(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "x.oeft"
        save_features(path, "m", np.zeros((1, 2, 2)))
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_features(path)

    @given(position_seed=st.integers(0, 2**32 - 1),
           new_byte=st.integers(0, 255))
    @settings(max_examples=40, deadline=None)
    def test_any_single_byte_corruption_is_detected(self, position_seed,
                                                    new_byte):
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/x.oeft"
            save_features(path, "mod", RngStream(3).normal((2, 3, 4)))
            raw = bytearray(open(path, "rb").read())
            pos = position_seed % len(raw)
            if raw[pos] == new_byte:
                new_byte = (new_byte + 1) % 256
            raw[pos] = new_byte
            open(path, "wb").write(bytes(raw))
            with pytest.raises((FormatError, UnicodeDecodeError)):
                load_features(path)


class TestBatchIter:
    def make_dataset(self, n=10):
        feats = {"a": RngStream(1).normal((n, 2, 3)),
                 "b": RngStream(2).normal((n, 2, 3))}
        return PairedDataset(("a", "b"), feats,
                             labels=tuple(str(i) for i in range(n)))

    def test_full_batch_covers_every_pair_once(self):
        dataset = self.make_dataset(8)
        batches = list(batch_iter(dataset, 8, seed=0))
        assert len(batches) == 1
        assert sorted(batches[0].indices) == list(range(8))

    def test_epochs_differ_but_reruns_match(self):
        dataset = self.make_dataset(10)
        epoch0 = [b.indices.tolist() for b in batch_iter(dataset, 4, 7, epoch=0)]
        epoch1 = [b.indices.tolist() for b in batch_iter(dataset, 4, 7, epoch=1)]
        again0 = [b.indices.tolist() for b in batch_iter(dataset, 4, 7, epoch=0)]
        assert epoch0 != epoch1
        assert epoch0 == again0

    def test_union_of_batches_is_the_full_index_set(self):
        dataset = self.make_dataset(10)
        seen = []
        for batch in batch_iter(dataset, 3, seed=1, drop_last=False):
            seen.extend(batch.indices.tolist())
        assert sorted(seen) == list(range(10))

    def test_batches_preserve_pairing(self):
        dataset = self.make_dataset(10)
        for batch in batch_iter(dataset, 4, seed=3):
            for row, idx in enumerate(batch.indices):
                np.testing.assert_array_equal(batch.features["a"][row],
                                              dataset.features["a"][idx])
                np.testing.assert_array_equal(batch.features["b"][row],
                                              dataset.features["b"][idx])
                assert batch.labels[row] == dataset.labels[idx]

    def test_oversized_batch_with_drop_last_warns_and_is_empty(self):
        dataset = self.make_dataset(3)
        with pytest.warns(UserWarning, match="empty"):
            batches = list(batch_iter(dataset, 5, seed=0, drop_last=True))
        assert batches == []

    def test_batch_size_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            list(batch_iter(self.make_dataset(3), 0, seed=0))


class TestManifests:
    def write_pair_world(self, tmp_path, n=6):
        config = two_modality_world(shapes=((2, 4), (3, 4)))
        world = synth_world(config, n, seed=4)
        for m in world.modalities:
            save_features(tmp_path / f"{m}.oeft", m, world.features[m])
        save_manifest(tmp_path / "pairs.manifest", "pair", world.modalities,
                      "train", [("alpha.oeft", "beta.oeft")])
        return world

    def test_pair_round_trip(self, tmp_path):
        world = self.write_pair_world(tmp_path)
        manifest = load_manifest(tmp_path / "pairs.manifest")
        assert manifest.kind == "pair"
        assert manifest.split == "train"
        dataset = load_paired_dataset(manifest)
        assert dataset.modalities == ("alpha", "beta")
        np.testing.assert_allclose(
            dataset.features["alpha"],
            world.features["alpha"].astype(np.float32), atol=0)

    def test_missing_file_rejected(self, tmp_path):
        save_manifest(tmp_path / "bad.manifest", "pair", ("a", "b"), "train",
                      [("nope.oeft", "also_nope.oeft")])
        with pytest.raises(FormatError, match="missing"):
            load_paired_dataset(load_manifest(tmp_path / "bad.manifest"))

    def test_record_count_mismatch_rejected(self, tmp_path):
        save_features(tmp_path / "a.oeft", "a", np.zeros((3, 2, 2)))
        save_features(tmp_path / "b.oeft", "b", np.zeros((4, 2, 2)))
        save_manifest(tmp_path / "m.manifest", "pair", ("a", "b"), "train",
                      [("a.oeft", "b.oeft")])
        with pytest.raises(BatchError):
            load_paired_dataset(load_manifest(tmp_path / "m.manifest"))

    def test_modality_header_mismatch_rejected(self, tmp_path):
        save_features(tmp_path / "a.oeft", "a", np.zeros((3, 2, 2)))
        save_features(tmp_path / "b.oeft", "b", np.zeros((3, 2, 2)))
        save_manifest(tmp_path / "m.manifest", "pair", ("a", "video"),
                      "train", [("a.oeft", "b.oeft")])
        with pytest.raises(FormatError, match="modality"):
            load_paired_dataset(load_manifest(tmp_path / "m.manifest"))

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        save_features(tmp_path / "a.oeft", "a", np.zeros((2, 2, 2)))
        (tmp_path / "m.manifest").write_text(
            "# header comment\n\nlabeled\ta\tvalidation\n# mid comment\n"
            "a.oeft\tcat\n", encoding="utf-8")
        feats, labels, modality = load_labeled_dataset(
            load_manifest(tmp_path / "m.manifest"))
        assert modality == "a"
        assert labels == ("cat", "cat")

    def test_labeled_loader_expands_shard_labels(self, tmp_path):
        save_features(tmp_path / "c0.oeft", "img", np.zeros((2, 2, 2)))
        save_features(tmp_path / "c1.oeft", "img", np.ones((3, 2, 2)))
        save_manifest(tmp_path / "l.manifest", "labeled", ("img",),
                      "validation", [("c0.oeft", "cat"), ("c1.oeft", "dog")])
        feats, labels, _ = load_labeled_dataset(
            load_manifest(tmp_path / "l.manifest"))
        assert labels == ("cat", "cat", "dog", "dog", "dog")
        assert feats.shape == (5, 2, 2)

    def test_vqa_loader_checks_answer_counts(self, tmp_path):
        save_features(tmp_path / "i.oeft", "img", np.zeros((2, 2, 2)))
        save_features(tmp_path / "q.oeft", "q", np.zeros((2, 2, 2)))
        (tmp_path / "ans.txt").write_text("yes\nno\nmaybe\n", encoding="utf-8")
        save_manifest(tmp_path / "v.manifest", "vqa", ("img", "q"), "train",
                      [("i.oeft", "q.oeft", "ans.txt")])
        with pytest.raises(BatchError):
            load_vqa_dataset(load_manifest(tmp_path / "v.manifest"))

    def test_unknown_kind_rejected(self, tmp_path):
        (tmp_path / "m.manifest").write_text("triplet\ta\tb\ttrain\n",
                                             encoding="utf-8")
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "m.manifest")


class TestVqaWorld:
    def config(self):
        return SyntheticWorldConfig(
            latent_dim=4,
            modalities=(ModalitySpec("image", 2, 6, 1),
                        ModalitySpec("question", 3, 6, 2)),
            class_count=4)

    def test_deterministic(self):
        a = synth_vqa_world(self.config(), 12, seed=3)
        b = synth_vqa_world(self.config(), 12, seed=3)
        assert a.answers == b.answers
        assert a.image_features.tobytes() == b.image_features.tobytes()

    def test_answers_depend_on_both_latents(self):
        # The same image latents with different question latents must change
        # at least one answer; otherwise the task would be unimodal.
        first = synth_vqa_world(self.config(), 64, seed=3, anchor_seed=0)
        second = synth_vqa_world(self.config(), 64, seed=4, anchor_seed=0)
        assert first.answers != second.answers

    def test_vocabulary_covers_all_classes(self):
        world = synth_vqa_world(self.config(), 32, seed=5)
        assert world.vocabulary == tuple(f"answer_{i}" for i in range(4))

    def test_needs_two_modalities(self):
        config = SyntheticWorldConfig(
            latent_dim=4, modalities=(ModalitySpec("image", 2, 6, 1),),
            class_count=4)
        with pytest.raises(ConfigurationError):
            synth_vqa_world(config, 4, seed=0)


def test_prompt_features_one_record_per_class():
    config = SyntheticWorldConfig(
        latent_dim=6,
        modalities=(ModalitySpec("text", 3, 8, 2),),
        class_count=5)
    prompts = prompt_features(config, "text", anchor_seed=0)
    assert prompts.shape == (5, 3, 8)


def test_class_anchor_assignment_is_by_direction():
    anchors = class_anchors(3, 4, seed=0)
    scaled = anchors * 7.5  # magnitude must not matter
    np.testing.assert_array_equal(assign_classes(scaled, anchors), [0, 1, 2])
