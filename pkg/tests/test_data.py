import itertools
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfvs.data import (DTYPE_F32, DTYPE_F64, Dataset, SynthConfig, VideoSample, decode_tensor, downsample_indices,
                         encode_tensor, equal_segments, generate_synthetic, load_manifest, load_splits, make_splits,
                         make_world, read_feature_file, save_dataset, save_splits, teacher_from_weights,
                         validate_segments, write_feature_file)
from selfvs.errors import ConfigurationError, FormatError, ValidationError


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestTensorFile:
    def test_header_layout(self, tmp_path):
        path = tmp_path / "x.svsf"
        write_feature_file(path, np.arange(6.0).reshape(2, 3))
        buf = path.read_bytes()
        assert len(buf) == 32 + 24
        assert buf[:4] == b"SVSF"
        assert struct.unpack("<III", buf[4:16]) == (1, 1, 2)
        assert struct.unpack("<QQ", buf[16:32]) == (2, 3)

    def test_round_trip_float32(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32)
        write_feature_file(tmp_path / "a.svsf", x)
        back = read_feature_file(tmp_path / "a.svsf")
        assert back.dtype == np.float64
        assert back.astype(np.float32).tobytes() == x.tobytes()

    def test_float64_round_trip_is_exact(self):
        x = np.random.default_rng(1).normal(size=7)
        assert decode_tensor(encode_tensor(x, DTYPE_F64)).tobytes() == x.tobytes()

    def test_scalar_and_empty(self):
        assert decode_tensor(encode_tensor(np.float32(2.5))).shape == ()
        assert decode_tensor(encode_tensor(np.zeros((0, 3)))).shape == (0, 3)

    def test_negative_zero_survives(self):
        back = decode_tensor(encode_tensor(np.array([-0.0, 0.0])))
        assert np.signbit(back[0]) and not np.signbit(back[1])

    def test_truncated_payload_offset(self):
        buf = encode_tensor(np.ones((2, 3)))
        with pytest.raises(FormatError, match="offset 55") as info:
            decode_tensor(buf[:-1])
        assert info.value.offset == 55

    @pytest.mark.parametrize("offset,patch,msg", [(0, b"XXXX", "magic"), (4, struct.pack("<I", 2), "version"),
                                                  (8, struct.pack("<I", 9), "dtype")])
    def test_bad_header_fields(self, offset, patch, msg):
        buf = bytearray(encode_tensor(np.ones(3)))
        buf[offset:offset + len(patch)] = patch
        with pytest.raises(FormatError, match=msg) as info:
            decode_tensor(bytes(buf))
        assert info.value.offset == offset

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_tensor(encode_tensor(np.ones(3)) + b"\0")

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            encode_tensor(np.array([1.0, np.nan]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError, match="no such"):
            read_feature_file(tmp_path / "nope.svsf")

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
    def test_round_trip_property(self, x):
        assert decode_tensor(encode_tensor(x, DTYPE_F32)).tobytes() == x.tobytes()


def write_one_video(root, n=6, dim=3, gt=None, segments=None, extra=None):
    write_feature_file(root / "f.svsf", np.ones((n, dim)))
    entry = {"id": "v0", "n_frames": n, "features": "f.svsf", "gt_scores": None, "user_annotations": None,
             "segments": segments, "teacher_repr": None}
    if gt is not None:
        write_feature_file(root / "g.svsf", gt)
        entry["gt_scores"] = "g.svsf"
    entry.update(extra or {})
    doc = {"name": "t", "input_dim": dim, "teacher_dim": 2, "videos": [entry]}
    (root / "manifest.json").write_text(json.dumps(doc))
    return root / "manifest.json"


class TestManifest:
    def test_minimal(self, tmp_path):
        ds = load_manifest(write_one_video(tmp_path))
        assert len(ds) == 1 and ds.get("v0").n_frames == 6

    def test_gt_length_mismatch(self, tmp_path):
        with pytest.raises(ValidationError, match=r"video 'v0', field 'gt_scores'"):
            load_manifest(write_one_video(tmp_path, gt=np.zeros(5)))

    def test_gt_out_of_range(self, tmp_path):
        with pytest.raises(ValidationError, match="gt_scores"):
            load_manifest(write_one_video(tmp_path, gt=np.full(6, 1.5)))

    def test_overlapping_segments(self, tmp_path):
        with pytest.raises(ValidationError, match="overlaps"):
            load_manifest(write_one_video(tmp_path, n=9, segments=[[0, 5], [4, 9]]))

    def test_missing_tensor_file(self, tmp_path):
        with pytest.raises(ValidationError, match="teacher_repr"):
            load_manifest(write_one_video(tmp_path, extra={"teacher_repr": "absent.svsf"}))

    def test_declared_frame_count_checked(self, tmp_path):
        with pytest.raises(ValidationError, match="n_frames"):
            load_manifest(write_one_video(tmp_path, extra={"n_frames": 7}))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            load_manifest(tmp_path / "manifest.json")

    def test_save_load_round_trip(self, tmp_path):
        ds, _ = generate_synthetic(SynthConfig(n_videos=3, n_frames=11))
        back = load_manifest(save_dataset(ds, tmp_path))
        assert back.ids == ds.ids
        for a, b in zip(ds, back):
            np.testing.assert_array_equal(a.frame_features, b.frame_features)
            np.testing.assert_array_equal(a.teacher_repr, b.teacher_repr)
            np.testing.assert_array_equal(a.user_annotations, b.user_annotations)
            assert [tuple(s) for s in b.segments] == list(a.segments)

    def test_duplicate_ids(self):
        v = VideoSample("a", np.ones((2, 2)))
        with pytest.raises(ValidationError, match="duplicate"):
            Dataset("d", 2, 1, [v, v])


class TestSegments:
    def test_gap(self):
        with pytest.raises(ValidationError, match="gap"):
            validate_segments([(0, 3), (4, 6)], 6)

    def test_incomplete_cover(self):
        with pytest.raises(ValidationError, match="cover"):
            validate_segments([(0, 3)], 6)

    def test_equal_chunks_with_remainder(self):
        assert equal_segments(12, 5) == [(0, 5), (5, 10), (10, 12)]
        validate_segments(equal_segments(12, 5), 12)


class TestSynthetic:
    def test_same_seed_same_bytes(self, tmp_path):
        cfg = SynthConfig(n_videos=3, n_frames=10, seed=4)
        save_dataset(generate_synthetic(cfg)[0], tmp_path / "a")
        save_dataset(generate_synthetic(cfg)[0], tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_different_seed_differs(self):
        a = generate_synthetic(SynthConfig(n_videos=1, seed=1))[0].videos[0]
        b = generate_synthetic(SynthConfig(n_videos=1, seed=2))[0].videos[0]
        assert not np.array_equal(a.frame_features, b.frame_features)

    def test_planted_weights_normalized(self):
        _, planted = generate_synthetic(SynthConfig(n_videos=5))
        for p in planted.values():
            assert np.all(p > 0)
            assert abs(p.sum() - 1.0) < 1e-9

    def test_sparse_subset_is_heavier(self):
        cfg = SynthConfig(n_videos=20, n_frames=40, saliency_gain=0.0)
        _, planted = generate_synthetic(cfg)
        for p in planted.values():
            top = np.sort(p)[::-1]
            k = int(round(cfg.sparsity * cfg.n_frames))
            assert np.allclose(top[:k], top[0]) and np.allclose(top[k:], top[-1])
            assert top[0] / top[-1] == pytest.approx(np.exp(cfg.boost))

    def test_noise_free_teacher_matches_generating_map(self):
        cfg = SynthConfig(n_videos=2, n_frames=9)
        ds, planted = generate_synthetic(cfg)
        world = make_world(cfg)
        for v in ds:
            expected = teacher_from_weights(world, v.frame_features, planted[v.id])
            np.testing.assert_allclose(v.teacher_repr, expected, rtol=1e-6, atol=1e-6)

    def test_one_hot_selects_frame(self):
        cfg = SynthConfig(n_videos=1, n_frames=6)
        world = make_world(cfg)
        F = generate_synthetic(cfg)[0].videos[0].frame_features
        onehot = np.eye(6)[4]
        assert teacher_from_weights(world, F, onehot).tobytes() == (F[4] @ world.transform).tobytes()

    def test_gt_rescaled_and_segments(self):
        ds, planted = generate_synthetic(SynthConfig(n_videos=2, n_frames=12))
        for v in ds:
            assert v.gt_scores.min() == 0.0 and v.gt_scores.max() == 1.0
            assert np.argmax(v.gt_scores) == np.argmax(planted[v.id])
            assert v.segments == [(0, 5), (5, 10), (10, 12)]
            v.validate()

    def test_noise_perturbs_teacher(self):
        a = generate_synthetic(SynthConfig(n_videos=1, noise=0.0))[0].videos[0]
        b = generate_synthetic(SynthConfig(n_videos=1, noise=0.5))[0].videos[0]
        np.testing.assert_array_equal(a.frame_features, b.frame_features)
        assert not np.allclose(a.teacher_repr, b.teacher_repr)

    @pytest.mark.parametrize("kw", [dict(sparsity=0.0), dict(sparsity=1.0), dict(noise=-1.0), dict(n_videos=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigurationError):
            generate_synthetic(SynthConfig(**kw))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_recovery_premise_three_frames(self, seed):
        # exhaustive search over the weight simplex at 0.01 resolution
        cfg = SynthConfig(n_videos=1, n_frames=3, sparsity=0.34, seed=seed)
        ds, planted = generate_synthetic(cfg)
        world = make_world(cfg)
        v = ds.videos[0]
        grid = np.array([(i, j, 100 - i - j) for i in range(101) for j in range(101 - i)]) / 100.0
        errs = np.linalg.norm(grid @ v.frame_features @ world.transform - v.teacher_repr, axis=1)
        best = grid[np.argmin(errs)]
        assert np.max(np.abs(best - planted[v.id])) <= 0.01 + 1e-12
        # every grid point away from the planted weights fits strictly worse
        far = np.max(np.abs(grid - planted[v.id]), axis=1) > 0.02
        assert errs[far].min() > errs.min()


class TestSplits:
    def test_fifty_videos_five_folds(self):
        ids = [f"v{i}" for i in range(50)]
        splits = make_splits(ids, k=5, seed=3)
        assert [len(s.test) for s in splits.splits] == [10] * 5
        tests = [set(s.test) for s in splits.splits]
        assert set().union(*tests) == set(ids)
        for a, b in itertools.combinations(tests, 2):
            assert not a & b
        for s in splits.splits:
            assert set(s.train) | set(s.test) == set(ids) and not set(s.train) & set(s.test)

    def test_deterministic(self):
        ids = [f"v{i}" for i in range(12)]
        assert make_splits(ids, 4, 9).to_dict() == make_splits(ids, 4, 9).to_dict()
        assert make_splits(ids, 4, 9).to_dict() != make_splits(ids, 4, 10).to_dict()

    def test_too_many_folds(self):
        with pytest.raises(ConfigurationError):
            make_splits(["a", "b"], k=3)

    def test_file_round_trip(self, tmp_path):
        ids = [f"v{i}" for i in range(10)]
        s = make_splits(ids, 5, 0)
        save_splits(s, tmp_path / "s.json")
        assert load_splits(tmp_path / "s.json", ids).to_dict() == s.to_dict()

    def test_unknown_id_rejected(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"k": 1, "splits": [{"train": ["a"], "test": ["zz"]}]}))
        with pytest.raises(ValidationError, match="unknown"):
            load_splits(tmp_path / "s.json", ["a", "b"])

    def test_overlap_rejected(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"k": 1, "splits": [{"train": ["a"], "test": ["a"]}]}))
        with pytest.raises(ValidationError, match="both sides"):
            load_splits(tmp_path / "s.json", ["a"])


class TestDownsample:
    def test_thirty_to_two(self):
        assert downsample_indices(30, 2, 60) == [0, 15, 30, 45]

    def test_identity(self):
        assert downsample_indices(25, 25, 7) == list(range(7))

    def test_empty(self):
        assert downsample_indices(30, 2, 0) == []

    def test_non_integer_ratio(self):
        assert downsample_indices(29.97, 2, 50) == [int(j * 29.97 / 2) for j in range(4)]

    def test_upsampling_rejected(self):
        with pytest.raises(ConfigurationError):
            downsample_indices(2, 30, 10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 120), st.integers(1, 120), st.integers(0, 400))
    def test_floor_oracle(self, a, b, n):
        fps_in, fps_out = max(a, b), min(a, b)
        out = downsample_indices(fps_in, fps_out, n)
        expected = [j * fps_in // fps_out for j in range(n) if j * fps_in // fps_out < n]
        assert out == expected
        assert all(x < y for x, y in zip(out, out[1:]))
