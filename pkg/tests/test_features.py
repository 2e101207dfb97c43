"""Feature store tests: binary round trips, header validation, manifest
rules, crop collapse, synthetic generator."""

import json

import numpy as np
import pytest

from wsvad import features as fs
from wsvad.errors import (ContractError, FeatureIOError, FormatError,
                          ValidationError)
from wsvad.metrics import roc_auc


def _seq(rng, t=4, c=1, d=8, modality="rgb_i3d"):
    return fs.FeatureSequence(modality, rng.normal(size=(t, c, d)).astype(np.float32))


class TestRoundTrip:
    def test_payload_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        seq = _seq(rng, t=7, c=5, d=16)
        p = tmp_path / "x.wsvf"
        fs.write_features(seq, p)
        back = fs.read_features(p, "rgb_i3d")
        assert back.data.tobytes() == seq.data.tobytes()

    def test_shape_grid(self, tmp_path):
        # the full documented envelope: every T in 1..64, both crop
        # counts, all four widths
        rng = np.random.default_rng(1)
        p = tmp_path / "grid.wsvf"
        for t in range(1, 65):
            for c in (1, 5):
                for d in (8, 128, 512, 1024):
                    seq = _seq(rng, t=t, c=c, d=d)
                    fs.write_features(seq, p)
                    back = fs.read_features(p)
                    assert back.data.shape == (t, c, d)
                    assert np.array_equal(back.data, seq.data)

    def test_header_only_read(self, tmp_path):
        p = tmp_path / "h.wsvf"
        fs.write_features(_seq(np.random.default_rng(2), t=9, c=5, d=12), p)
        assert fs.read_header(p) == (9, 5, 12)


class TestCorruptFiles:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.wsvf"
        fs.write_features(_seq(np.random.default_rng(0)), p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"XXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            fs.read_features(p)

    def test_short_file(self, tmp_path):
        p = tmp_path / "short.wsvf"
        p.write_bytes(b"\x00" * 7)
        with pytest.raises(FeatureIOError):
            fs.read_features(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "trunc.wsvf"
        fs.write_features(_seq(np.random.default_rng(0), t=4, d=8), p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-5])
        with pytest.raises(FeatureIOError):
            fs.read_features(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "trail.wsvf"
        fs.write_features(_seq(np.random.default_rng(0), t=2, d=4), p)
        p.write_bytes(p.read_bytes() + b"\x01\x02")
        with pytest.raises(FormatError):
            fs.read_features(p)

    @pytest.mark.parametrize("field,value", [
        ("version", 9), ("dtype", 3), ("ndim", 2),
    ])
    def test_bad_header_fields(self, tmp_path, field, value):
        p = tmp_path / "f.wsvf"
        fs.write_features(_seq(np.random.default_rng(0)), p)
        raw = bytearray(p.read_bytes())
        offset = {"version": 4, "dtype": 5, "ndim": 6}[field]
        raw[offset] = value
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            fs.read_features(p)

    def test_random_header_corruption_typed(self, tmp_path):
        """Any header corruption raises a typed error, never an unhandled one."""
        rng = np.random.default_rng(7)
        p = tmp_path / "fuzz.wsvf"
        fs.write_features(_seq(rng, t=3, c=1, d=6), p)
        pristine = p.read_bytes()
        for _ in range(300):
            raw = bytearray(pristine)
            for _ in range(rng.integers(1, 4)):
                raw[rng.integers(0, fs.HEADER.size)] = rng.integers(0, 256)
            p.write_bytes(bytes(raw))
            try:
                fs.read_features(p)
            except (FormatError, FeatureIOError):
                pass


class TestSnippetCount:
    @pytest.mark.parametrize("frames,expected", [(16, 1), (17, 1), (160, 10)])
    def test_floor_rule(self, frames, expected):
        assert fs.snippet_count(frames) == expected

    @pytest.mark.parametrize("frames", [1, 15])
    def test_sub_snippet_rejected(self, frames):
        with pytest.raises(ValidationError):
            fs.snippet_count(frames)


class TestManifest:
    def _write(self, tmp_path, records):
        p = tmp_path / "manifest.jsonl"
        with open(p, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        return p

    def _record(self, tmp_path, video_id, label=0, split="train", t=4, modalities=("rgb_i3d", "clip")):
        rng = np.random.default_rng(abs(hash(video_id)) % 2 ** 31)
        rec = {"video_id": video_id, "label": label, "split": split}
        for m in modalities:
            path = tmp_path / f"{video_id}.{m}.wsvf"
            fs.write_features(_seq(rng, t=t, d=8, modality=m), path)
            rec[m] = str(path)
        return rec

    def test_empty_manifest(self, tmp_path):
        p = self._write(tmp_path, [])
        assert fs.load_manifest(p) == []

    def test_bad_label(self, tmp_path):
        rec = self._record(tmp_path, "v0")
        rec["label"] = 2
        with pytest.raises(ValidationError):
            fs.load_manifest(self._write(tmp_path, [rec]))

    def test_three_records_with_splits(self, tmp_path):
        recs = [self._record(tmp_path, "a", split="train"),
                self._record(tmp_path, "b", label=1, split="train"),
                self._record(tmp_path, "c", split="test")]
        bags = fs.load_manifest(self._write(tmp_path, recs))
        assert [b.video_id for b in bags] == ["a", "b", "c"]
        assert [b.split for b in bags] == ["train", "train", "test"]
        assert bags[1].label == 1

    def test_missing_file(self, tmp_path):
        rec = self._record(tmp_path, "v0")
        rec["clip"] = str(tmp_path / "nope.wsvf")
        with pytest.raises(ValidationError):
            fs.load_manifest(self._write(tmp_path, [rec]))

    def test_inconsistent_snippets_names_video(self, tmp_path):
        rec = self._record(tmp_path, "vbad")
        other = tmp_path / "other.wsvf"
        fs.write_features(_seq(np.random.default_rng(0), t=9, d=8), other)
        rec["clip"] = str(other)
        with pytest.raises(ValidationError, match="vbad"):
            fs.load_manifest(self._write(tmp_path, [rec]))

    def test_frame_count_consistency(self, tmp_path):
        rec = self._record(tmp_path, "v0", t=4)
        rec["frame_count"] = 64
        bags = fs.load_manifest(self._write(tmp_path, [rec]))
        assert bags[0].snippets == 4
        rec["frame_count"] = 96  # implies 6 snippets
        with pytest.raises(ValidationError):
            fs.load_manifest(self._write(tmp_path, [rec]))

    def test_lazy_loading_and_cache(self, tmp_path):
        rec = self._record(tmp_path, "v0")
        bags = fs.load_manifest(self._write(tmp_path, [rec]))
        bag = bags[0]
        assert not bag.sequences
        seq = bag.features("rgb_i3d")
        assert seq.snippets == bag.snippets
        assert bag.features("rgb_i3d") is seq


class TestCollapseCrops:
    def test_single_crop_mean_identity(self):
        seq = _seq(np.random.default_rng(0), c=1)
        assert fs.collapse_crops(seq, "mean") is seq

    def test_opposite_crops_cancel(self):
        v = np.random.default_rng(1).normal(size=(3, 1, 4)).astype(np.float32)
        data = np.concatenate([v, -v], axis=1)
        # crop count 2 is outside the contract, so build the array by hand
        seq = fs.FeatureSequence.__new__(fs.FeatureSequence)
        seq.modality = "rgb_i3d"
        seq.data = data
        out = seq.data.mean(axis=1)
        np.testing.assert_allclose(out, 0.0, atol=1e-7)

    def test_mean_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        seq = _seq(rng, t=5, c=5, d=6)
        got = fs.collapse_crops(seq, "mean").data
        want = np.zeros((5, 1, 6), dtype=np.float64)
        for c in range(5):
            want[:, 0, :] += seq.data[:, c, :]
        want /= 5
        np.testing.assert_allclose(got[:, 0, :], want[:, 0, :], atol=1e-6)

    def test_flatten_as_batch(self):
        seq = _seq(np.random.default_rng(3), t=4, c=5, d=6)
        parts = fs.collapse_crops(seq, "flatten_as_batch")
        assert len(parts) == 5
        for c, part in enumerate(parts):
            assert part.data.shape == (4, 1, 6)
            np.testing.assert_array_equal(part.data[:, 0, :], seq.data[:, c, :])


class TestSynth:
    def test_deterministic(self):
        spec = fs.SynthSpec(n_normal=3, n_abnormal=3, seed=9)
        bags_a, oracle_a = fs.generate_synth(spec)
        bags_b, oracle_b = fs.generate_synth(spec)
        for a, b in zip(bags_a, bags_b):
            assert a.video_id == b.video_id
            for m in a.modalities:
                assert np.array_equal(a.features(m).data, b.features(m).data)
        sa, _ = oracle_a.pooled()
        sb, _ = oracle_b.pooled()
        assert np.array_equal(sa, sb)

    def test_mil_assumption(self):
        bags, _ = fs.generate_synth(fs.SynthSpec(n_normal=5, n_abnormal=5, seed=3))
        for bag in bags:
            anomalous = int(bag.snippet_labels.sum())
            if bag.label == 1:
                assert anomalous >= 1
            else:
                assert anomalous == 0

    def test_indistinguishable_classes_auc_half(self):
        spec = fs.SynthSpec(n_normal=40, n_abnormal=40, mean_shift=0.0,
                            magnitude_gain=1.0, seed=5)
        _, oracle = fs.generate_synth(spec)
        scores, labels = oracle.pooled()
        assert abs(roc_auc(scores, labels) - 0.5) < 0.05

    def test_separated_classes_high_auc(self):
        spec = fs.SynthSpec(n_normal=50, n_abnormal=50, mean_shift=4.0,
                            magnitude_gain=1.5, seed=6)
        _, oracle = fs.generate_synth(spec)
        scores, labels = oracle.pooled()
        assert roc_auc(scores, labels) > 0.99

    def test_write_dataset_round_trip(self, tmp_path):
        bags, oracle = fs.generate_synth(fs.SynthSpec(n_normal=2, n_abnormal=2, seed=1))
        fs.split_synth(bags, 1, 1)
        manifest = fs.write_dataset(bags, oracle, tmp_path)
        loaded = fs.load_manifest(manifest)
        assert len(loaded) == 4
        assert sum(1 for b in loaded if b.split == "test") == 2
        for orig, back in zip(bags, loaded):
            assert back.snippets == orig.snippets
            for m in orig.modalities:
                assert np.array_equal(back.features(m).data, orig.features(m).data)
            np.testing.assert_array_equal(back.snippet_labels, orig.snippet_labels)
        assert (tmp_path / "oracle_scores.csv").exists()

    def test_bad_spec_rejected(self):
        with pytest.raises(ContractError):
            fs.SynthSpec(n_normal=0, n_abnormal=1)
        with pytest.raises(ContractError):
            fs.SynthSpec(n_normal=1, n_abnormal=1, anomaly_span_fraction=0.0)
