import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trifuse.data import (HEADER, MAGIC, FeatureSequence, Manifest, ManifestRecord, SynthConfig, WindowSample,
                          augment, decode_block, encode_block, generate_synthetic, load_dataset, read_features,
                          read_manifest, synthetic_arrays, synthetic_dataset, uniform_subsample, window_starts,
                          windows_from_frames, write_features, write_manifest)
from trifuse.errors import ConfigError, ContractError, DataError, ParseError


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestWindows:
    def test_single_window(self):
        assert window_starts(64, stride=16) == [0]

    def test_three_windows(self):
        assert window_starts(96, stride=16) == [0, 16, 32]

    def test_short_clip(self):
        assert window_starts(10, stride=16) == [0]

    def test_bad_args(self):
        with pytest.raises(ContractError):
            window_starts(0)
        with pytest.raises(ContractError):
            window_starts(64, stride=0)

    def test_subsample_examples(self):
        assert uniform_subsample(64, 16) == list(range(0, 64, 4))
        assert uniform_subsample(64, 4) == [0, 16, 32, 48]
        assert uniform_subsample(64, 64) == list(range(64))

    def test_subsample_k_too_large(self):
        with pytest.raises(ContractError):
            uniform_subsample(8, 9)

    def test_subsample_exhaustive_small_windows(self):
        for w in range(1, 257):
            for k in range(1, w + 1):
                idx = np.array(uniform_subsample(w, k))
                assert len(idx) == k and idx[0] == 0 and idx[-1] <= w - 1
                assert np.all(np.diff(idx) > 0)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 4096).flatmap(lambda w: st.tuples(st.just(w), st.integers(1, w))))
    def test_subsample_large_windows(self, wk):
        w, k = wk
        idx = np.array(uniform_subsample(w, k))
        assert len(idx) == k and idx[0] == 0 and idx[-1] <= w - 1 and np.all(np.diff(idx) > 0)

    def test_windows_from_frames_pads_short_clip(self):
        frames = {m: np.arange(10.0)[:, None] * np.ones((1, 2)) for m in ("video", "image", "text")}
        (w,) = windows_from_frames(frames, label=1)
        assert w.video.T == 16 and w.text.T == 4
        # frames past the end repeat frame 9
        np.testing.assert_array_equal(w.text.data[:, 0], [0, 9, 9, 9])
        np.testing.assert_array_equal(w.video.data[:3, 0], [0, 4, 8])

    def test_windows_from_frames_slides(self):
        frames = {m: np.arange(96.0)[:, None] for m in ("video", "image", "text")}
        ws = windows_from_frames(frames, label=0)
        assert [w.video.data[0, 0] for w in ws] == [0, 16, 32]
        np.testing.assert_array_equal(ws[1].text.data[:, 0], [16, 32, 48, 64])

    def test_mismatched_frame_counts(self):
        frames = {"video": np.zeros((64, 2)), "image": np.zeros((64, 2)), "text": np.zeros((60, 2))}
        with pytest.raises(ContractError):
            windows_from_frames(frames, label=0)


class TestTypes:
    def test_nan_rejected(self):
        with pytest.raises(DataError):
            FeatureSequence("video", np.array([[np.nan]]))

    def test_unknown_modality(self):
        with pytest.raises(ContractError):
            FeatureSequence("audio", np.zeros((1, 1)))

    def test_window_sample_lengths(self):
        seq = lambda m, T: FeatureSequence(m, np.zeros((T, 2)))
        WindowSample(seq("video", 16), seq("image", 16), seq("text", 4), 1)
        with pytest.raises(ContractError):
            WindowSample(seq("video", 16), seq("image", 15), seq("text", 4), 1)


class TestFeatureFiles:
    def test_roundtrip_and_size(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(16, 3)).astype(np.float32)
        p = tmp_path / "a.mmfb"
        write_features(p, FeatureSequence("video", x))
        assert p.stat().st_size == 208
        np.testing.assert_array_equal(read_features(p, "video").data, x)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.mmfb"
        p.write_bytes(b"XXXX" + encode_block(np.zeros((1, 1)))[4:])
        with pytest.raises(ParseError) as ei:
            read_features(p)
        assert ei.value.offset == 0 and "offset 0" in str(ei.value)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "a.mmfb"
        p.write_bytes(HEADER.pack(MAGIC, 9, 1, 1) + b"\0" * 4)
        with pytest.raises(ParseError) as ei:
            read_features(p)
        assert ei.value.offset == 4

    def test_feature_files_reject_float64_blocks(self, tmp_path):
        p = tmp_path / "a.mmfb"
        p.write_bytes(encode_block(np.zeros((1, 1)), version=2))
        with pytest.raises(ParseError):
            read_features(p)

    @pytest.mark.parametrize("cut", [3, 10, 20])
    def test_truncated(self, tmp_path, cut):
        blob = encode_block(np.ones((2, 2)))
        p = tmp_path / "a.mmfb"
        p.write_bytes(blob[:cut])
        with pytest.raises(ParseError) as ei:
            read_features(p)
        assert ei.value.offset == cut

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "a.mmfb"
        p.write_bytes(encode_block(np.ones((2, 2))) + b"\0")
        with pytest.raises(ParseError):
            read_features(p)

    def test_nan_payload(self, tmp_path):
        p = tmp_path / "a.mmfb"
        p.write_bytes(encode_block(np.array([[1.0, np.nan]])))
        with pytest.raises(DataError):
            read_features(p)

    def test_decode_block_at_offset(self):
        a, b = np.ones((1, 2)), 2 * np.ones((3, 1))
        buf = encode_block(a, 2) + encode_block(b, 2)
        m1, end = decode_block(buf)
        m2, end2 = decode_block(buf, end)
        np.testing.assert_array_equal(m1, a)
        np.testing.assert_array_equal(m2, b)
        assert end2 == len(buf)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 512), st.integers(0, 2**32 - 1))
    def test_roundtrip_property(self, T, d, seed):
        x = np.random.default_rng(seed).normal(size=(T, d)).astype(np.float32)
        mat, end = decode_block(encode_block(x), versions=(1,))
        assert end == 16 + 4 * T * d
        assert mat.tobytes() == x.tobytes()


class TestManifest:
    def test_roundtrip(self, tmp_path):
        recs = [ManifestRecord("a", 1, 1, "a.v", "a.i", "a.t"), ManifestRecord("b", 2, 0, "b.v", "b.i", "b.t")]
        write_manifest(tmp_path / "m.jsonl", recs)
        m = read_manifest(tmp_path / "m.jsonl")
        assert m.records == recs and m.root == tmp_path and m.task() == "classification"

    def test_bad_line(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"id": "a"}\n')
        with pytest.raises(ConfigError, match=":1:"):
            read_manifest(tmp_path / "m.jsonl")

    def test_mixed_labels(self):
        m = Manifest([ManifestRecord("a", 1, 1, "", "", ""), ManifestRecord("b", 1, [0.1, 0.2], "", "", "")])
        with pytest.raises(ConfigError):
            m.task()

    def test_validate_missing_file(self, tmp_path):
        m = generate_synthetic(SynthConfig(n_clips=10, seed=0), tmp_path)
        m.validate()
        (tmp_path / m.records[3].text).unlink()
        with pytest.raises(ConfigError, match="missing text"):
            m.validate()

    def test_validate_label_out_of_range(self):
        m = Manifest([ManifestRecord("a", 1, [0.1, 1.5], "", "", "")])
        with pytest.raises(ConfigError):
            m.validate("regression")

    def test_load_matches_in_memory(self, tmp_path):
        cfg = SynthConfig(n_clips=20, seed=4, task="regression")
        ds = load_dataset(generate_synthetic(cfg, tmp_path))
        mem = synthetic_dataset(cfg)
        for m in ("video", "image", "text"):
            np.testing.assert_array_equal(getattr(ds, m), getattr(mem, m))
        np.testing.assert_array_equal(ds.labels, mem.labels)
        np.testing.assert_array_equal(ds.folds, mem.folds)

    def test_load_windows_long_clips(self, tmp_path):
        rng = np.random.default_rng(0)
        rec = ManifestRecord("c", 2, 1, "c.v", "c.i", "c.t")
        for m in ("video", "image", "text"):
            write_features(tmp_path / f"c.{m[0]}", FeatureSequence(m, rng.normal(size=(96, 3))))
        write_manifest(tmp_path / "m.jsonl", [rec])
        ds = load_dataset(read_manifest(tmp_path / "m.jsonl"))
        assert len(ds) == 3 and ds.video.shape == (3, 16, 3) and ds.text.shape == (3, 4, 3)
        assert list(ds.folds) == [2, 2, 2]


class TestSynthetic:
    def test_deterministic_tree(self, tmp_path):
        cfg = SynthConfig(n_clips=12, seed=1)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_seed_changes_output(self):
        a = synthetic_arrays(SynthConfig(n_clips=10, seed=1))[1]["video"]
        b = synthetic_arrays(SynthConfig(n_clips=10, seed=2))[1]["video"]
        assert not np.array_equal(a, b)

    def test_class_balance(self):
        labels = synthetic_arrays(SynthConfig(n_clips=1000, seed=0))[2]
        assert 0.40 <= labels.mean() <= 0.60

    def test_folds_and_shapes(self):
        ds = synthetic_dataset(SynthConfig(n_clips=20, d_v=5, d_i=6, d_t=7, seed=0))
        assert ds.dims == {"video": 5, "image": 6, "text": 7}
        assert ds.video.shape == (20, 16, 5) and ds.text.shape == (20, 4, 7)
        assert list(np.bincount(ds.folds)[1:]) == [4] * 5

    def test_regression_targets_in_range(self):
        y = synthetic_arrays(SynthConfig(n_clips=50, seed=0, task="regression"))[2]
        assert y.shape == (50, 2) and np.abs(y).max() < 1

    @pytest.mark.parametrize("kw", [{"n_clips": 9}, {"d_v": 3}, {"task": "ranking"}])
    def test_bad_config(self, kw):
        with pytest.raises(ContractError):
            synthetic_arrays(SynthConfig(**{"n_clips": 20, **kw}))

    def test_unimodal_probes_fall_short_of_all_modalities(self):
        ds = synthetic_dataset(SynthConfig(n_clips=2000, seed=0))
        y = ds.labels.ravel()
        feats = {m: getattr(ds, m).mean(axis=1) for m in ("video", "image", "text")}
        feats["all"] = np.hstack(list(feats.values()))
        acc = {k: probe_accuracy(v, y) for k, v in feats.items()}
        for m in ("video", "image", "text"):
            assert acc[m] < acc["all"], acc


def probe_accuracy(X, y, steps=300):
    """Held-out accuracy of a logistic probe on linear plus pairwise-product features."""
    X = (X - X.mean(0)) / X.std(0)
    iu = np.triu_indices(X.shape[1])
    Z = np.hstack([X, (X[:, :, None] * X[:, None, :])[:, iu[0], iu[1]], np.ones((len(X), 1))])
    tr, te = slice(0, 1500), slice(1500, None)
    w = np.zeros(Z.shape[1])
    for _ in range(steps):
        p = 1 / (1 + np.exp(-Z[tr] @ w))
        w -= 0.1 * (Z[tr].T @ (p - y[tr]) / 1500 + 1e-3 * w)
    return float(np.mean((Z[te] @ w > 0) == y[te]))


class TestAugment:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32)
        np.testing.assert_array_equal(augment(x, 0.0, 0.0), x)

    def test_full_mask(self):
        assert not augment(np.ones((5, 3)), 0.1, 1.0, np.random.default_rng(0)).any()

    def test_seeded(self):
        x = np.ones((6, 2))
        a = augment(x, 0.1, 0.3, np.random.default_rng(3))
        b = augment(x, 0.1, 0.3, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_feature_sequence_in_and_out(self):
        seq = FeatureSequence("text", np.ones((4, 2)))
        out = augment(seq, 0.0, 0.0)
        assert isinstance(out, FeatureSequence) and out.modality == "text"
        np.testing.assert_array_equal(out.data, seq.data)

    def test_mask_rate(self):
        out = augment(np.ones((10_000, 1)), 0.0, 0.3, np.random.default_rng(0))
        assert abs((out == 0).mean() - 0.3) < 0.02

    def test_bad_args(self):
        with pytest.raises(ContractError):
            augment(np.ones((2, 2)), -1.0, 0.1)
        with pytest.raises(ContractError):
            augment(np.ones((2, 2)), 0.1, 1.5)
