import numpy as np
import pytest

from ciltrack.data import iou
from ciltrack.errors import ValidationError
from ciltrack.simworld import (
    ConfidenceModel,
    NoiseConfig,
    WorldConfig,
    class_basis,
    corrupt_detections,
    generate_world,
)

SMALL = WorldConfig(n_sequences=4, frames_per_sequence=10)


class TestConfig:
    def test_frequency_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            WorldConfig(n_classes=3, class_frequencies=(1.0, 2.0))

    def test_negative_frequency_rejected(self):
        with pytest.raises(ValidationError):
            WorldConfig(
                n_classes=2, class_frequencies=(1.0, -2.0),
            )

    def test_fn_prob_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            NoiseConfig(fn_prob=1.5)


class TestGenerate:
    def test_deterministic(self):
        a = generate_world(SMALL)
        b = generate_world(SMALL)
        for (_, fa), (_, fb) in zip(a.sequences, b.sequences):
            for x, y in zip(fa, fb):
                for p, q in zip(x.annotations, y.annotations):
                    assert p.box == q.box
                    assert np.array_equal(p.feature, q.feature)

    def test_seed_changes_output(self):
        a = generate_world(SMALL)
        b = generate_world(WorldConfig(**{**vars(SMALL), "seed": 1}))
        boxes_a = [f.annotations[0].box for _, fr in a.sequences for f in fr]
        boxes_b = [f.annotations[0].box for _, fr in b.sequences for f in fr]
        assert boxes_a != boxes_b

    def test_shapes_and_counts(self):
        ds = generate_world(SMALL)
        assert len(ds.sequences) == SMALL.n_sequences
        for _, frames in ds.sequences:
            assert len(frames) == SMALL.frames_per_sequence
            for frame in frames:
                assert len(frame.annotations) == SMALL.objects_per_sequence
                for ann in frame.annotations:
                    assert ann.feature.shape == (SMALL.feature_dim,)
                    assert ann.is_ground_truth

    def test_every_class_in_every_sequence(self):
        # The census pass puts one object of each class in each sequence
        # whenever objects_per_sequence >= n_classes.
        ds = generate_world(SMALL)
        for _, frames in ds.sequences:
            classes = {a.class_id for a in frames[0].annotations}
            assert classes == set(range(SMALL.n_classes))

    def test_instance_ids_unique_across_sequences(self):
        ds = generate_world(SMALL)
        per_seq = [
            {a.instance_id for f in frames for a in f.annotations}
            for _, frames in ds.sequences
        ]
        for i in range(len(per_seq)):
            for j in range(i + 1, len(per_seq)):
                assert not (per_seq[i] & per_seq[j])

    def test_appearance_seed_shared_across_splits(self):
        # Same appearance_seed, different sample seed: same class basis.
        cfg_a = SMALL
        cfg_b = WorldConfig(**{**vars(SMALL), "seed": 99})
        rng = np.random.default_rng(np.random.SeedSequence(cfg_a.appearance_seed))
        mix_a, base_a = class_basis(cfg_a, rng)
        rng = np.random.default_rng(np.random.SeedSequence(cfg_b.appearance_seed))
        mix_b, base_b = class_basis(cfg_b, rng)
        assert np.array_equal(mix_a, mix_b)
        assert np.array_equal(base_a, base_b)

    def test_class_base_vector_separation(self):
        rng = np.random.default_rng(0)
        _, bases = class_basis(SMALL, rng)
        for i in range(bases.shape[0]):
            for j in range(i + 1, bases.shape[0]):
                d = float(np.linalg.norm(bases[i] - bases[j]))
                assert d == pytest.approx(SMALL.class_separation)

    def test_feature_noise_level(self):
        # Repeated observations of one instance should scatter at the
        # configured appearance noise scale around their mean.
        ds = generate_world(SMALL)
        _, frames = ds.sequences[0]
        inst = frames[0].annotations[0].instance_id
        feats = np.stack(
            [
                a.feature
                for f in frames
                for a in f.annotations
                if a.instance_id == inst
            ]
        )
        resid = feats - feats.mean(axis=0)
        std = float(resid.std())
        assert 0.5 * SMALL.appearance_noise_std < std < 2.0 * SMALL.appearance_noise_std


class TestCorrupt:
    def test_deterministic(self):
        ds = generate_world(SMALL)
        a = corrupt_detections(ds, NoiseConfig(), seed=5)
        b = corrupt_detections(ds, NoiseConfig(), seed=5)
        for (_, fa), (_, fb) in zip(a.sequences, b.sequences):
            for x, y in zip(fa, fb):
                assert len(x.proposals) == len(y.proposals)
                for p, q in zip(x.proposals, y.proposals):
                    assert p.box == q.box
                    assert p.confidence == q.confidence

    def test_annotations_untouched(self):
        ds = generate_world(SMALL)
        out = corrupt_detections(ds, NoiseConfig(), seed=5)
        for (_, fa), (_, fb) in zip(ds.sequences, out.sequences):
            for x, y in zip(fa, fb):
                assert x.annotations == y.annotations

    def test_no_noise_reproduces_boxes(self):
        ds = generate_world(SMALL)
        quiet = NoiseConfig(fn_prob=0.0, fp_rate=0.0, jitter_std=0.0)
        out = corrupt_detections(ds, quiet, seed=5)
        for _, frames in out.sequences:
            for frame in frames:
                assert len(frame.proposals) == len(frame.annotations)
                for ann, prop in zip(frame.annotations, frame.proposals):
                    assert iou(ann.box, prop.box) == pytest.approx(1.0)
                    assert prop.confidence is not None

    def test_fn_rate_statistics(self):
        ds = generate_world(WorldConfig(n_sequences=8, frames_per_sequence=40))
        noise = NoiseConfig(fn_prob=0.3, fp_rate=0.0, jitter_std=0.0)
        out = corrupt_detections(ds, noise, seed=5)
        n_gt = out.n_annotations()
        n_props = sum(
            len(f.proposals) for _, frames in out.sequences for f in frames
        )
        rate = 1.0 - n_props / n_gt
        assert abs(rate - noise.fn_prob) < 0.03

    def test_fp_rate_statistics(self):
        ds = generate_world(WorldConfig(n_sequences=8, frames_per_sequence=40))
        noise = NoiseConfig(fn_prob=0.0, fp_rate=1.5, jitter_std=0.0)
        out = corrupt_detections(ds, noise, seed=5)
        n_frames = sum(len(frames) for _, frames in out.sequences)
        n_clutter = sum(
            1
            for _, frames in out.sequences
            for f in frames
            for p in f.proposals
            if p.instance_id is None
        )
        assert abs(n_clutter / n_frames - noise.fp_rate) < 0.15

    def test_confidence_supports_overlap(self):
        # With the default confidence model some clutter must exceed some
        # true detections, otherwise a threshold could separate them.
        ds = generate_world(WorldConfig(n_sequences=8, frames_per_sequence=40))
        out = corrupt_detections(ds, NoiseConfig(), seed=5)
        true_confs, clutter_confs = [], []
        for _, frames in out.sequences:
            for f in frames:
                for p in f.proposals:
                    (clutter_confs if p.instance_id is None else true_confs).append(
                        p.confidence
                    )
        assert max(clutter_confs) > min(true_confs)
        cm = ConfidenceModel()
        assert abs(np.mean(true_confs) - cm.true_mean) < 0.05
        assert abs(np.mean(clutter_confs) - cm.clutter_mean) < 0.05
