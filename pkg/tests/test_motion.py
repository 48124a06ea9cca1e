import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from garmentdyn.body import BodyPose
from garmentdyn.motion import (KINDS, MotionSequence, SchemaError, angular_speed, default_corpus,
                               generate_procedural, load_motion, load_motion_dir, load_split, oscillating_root,
                               resample, save_motion, save_split, split_train_val)


def random_sequence(rng, n=7, joints=16):
    return MotionSequence.from_arrays(rng.uniform(-2, 2, (n, joints, 3)), rng.normal(size=(n, 3)), 24.0, "rand")


class TestFiles:
    def test_round_trip(self, tmp_path, rng):
        seq = random_sequence(rng)
        save_motion(seq, tmp_path / "m.json")
        back = load_motion(tmp_path / "m.json")
        assert back.fps == 24.0 and back.name == "rand" and len(back) == 7
        assert np.abs(back.rotations - seq.rotations).max() < 1e-9
        assert np.abs(back.translations - seq.translations).max() < 1e-9

    def test_schema_keys(self, tmp_path, rng):
        save_motion(random_sequence(rng, 2, 3), tmp_path / "m.json")
        raw = json.loads((tmp_path / "m.json").read_text())
        assert raw["fps"] == 24.0 and raw["joint_count"] == 3
        assert set(raw["frames"][0]) == {"root_translation", "rotations"}

    def test_mismatched_joint_counts(self, tmp_path):
        doc = {"fps": 30, "joint_count": 2,
               "frames": [{"root_translation": [0, 0, 0], "rotations": [[0, 0, 0]] * 2},
                          {"root_translation": [0, 0, 0], "rotations": [[0, 0, 0]] * 3}]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaError):
            load_motion(tmp_path / "m.json")
        with pytest.raises(SchemaError):
            MotionSequence(30.0, [BodyPose(np.zeros((2, 3))), BodyPose(np.zeros((3, 3)))])

    @pytest.mark.parametrize("fps", [0, -5, "fast"])
    def test_bad_fps(self, tmp_path, fps):
        doc = {"fps": fps, "joint_count": 1, "frames": [{"root_translation": [0, 0, 0], "rotations": [[0, 0, 0]]}]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaError) as info:
            load_motion(tmp_path / "m.json")
        assert info.value.field == "fps"

    def test_missing_field(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"fps": 30, "frames": [{"rotations": [[0, 0, 0]]}]}))
        with pytest.raises(SchemaError):
            load_motion(tmp_path / "m.json")

    def test_directory_load_is_sorted(self, tmp_path, rng):
        for name in ("b", "a", "c"):
            seq = random_sequence(rng, 3)
            seq.name = name
            save_motion(seq, tmp_path / f"{name}.json")
        assert [s.name for s in load_motion_dir(tmp_path)] == ["a", "b", "c"]


class TestProcedural:
    def test_idle_only_bobs(self):
        seq = generate_procedural("idle", 90, 3)
        assert np.array_equal(seq.rotations, np.broadcast_to(seq.rotations[0], seq.rotations.shape))
        tr = seq.translations
        assert np.ptp(tr[:, :2], axis=0).max() == 0.0
        assert np.abs(tr[:, 2] - tr[0, 2]).max() <= 0.02

    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic(self, kind):
        a, b = generate_procedural(kind, 20, 11), generate_procedural(kind, 20, 11)
        assert np.array_equal(a.rotations, b.rotations) and np.array_equal(a.translations, b.translations)

    @given(st.integers(0, 10_000), st.sampled_from(KINDS))
    @settings(max_examples=20, deadline=None)
    def test_angular_speed_capped(self, seed, kind):
        seq = generate_procedural(kind, 60, seed)
        assert angular_speed(seq).max() <= 10.0

    def test_custom_cap(self):
        seq = generate_procedural("random_smooth", 60, 1, max_angular_speed=2.0)
        assert angular_speed(seq).max() <= 2.0

    def test_oscillating_root(self):
        seq = oscillating_root(31, 30.0, 0.1, 1.0)
        assert not seq.rotations.any()
        assert seq.translations[:, 0].max() == pytest.approx(0.1, abs=1e-3)
        assert not seq.translations[:, 1:].any()

    def test_default_corpus_size(self):
        corpus = default_corpus(0)
        assert sum(len(s) for s in corpus) >= 3000
        assert len({s.name for s in corpus}) == len(corpus)


class TestResample:
    def test_same_rate_is_identity(self, rng):
        seq = random_sequence(rng)
        out = resample(seq, seq.fps)
        assert np.allclose(out.translations, seq.translations, atol=1e-12)
        assert np.allclose(Rotation.from_rotvec(out.rotations.reshape(-1, 3)).as_matrix(),
                           Rotation.from_rotvec(seq.rotations.reshape(-1, 3)).as_matrix(), atol=1e-9)

    def test_doubling_rate_interpolates(self):
        seq = MotionSequence.from_arrays(np.array([[[0, 0, 0]], [[0, 0, 1.0]]]), np.array([[0, 0, 0], [1.0, 0, 0]]),
                                         10.0)
        out = resample(seq, 20.0)
        assert len(out) == 3
        assert np.allclose(out.translations[1], [0.5, 0, 0])
        assert np.allclose(out.rotations[1, 0], [0, 0, 0.5])


class TestSplit:
    def test_disjoint_and_persisted(self, tmp_path):
        corpus = default_corpus(0, frames_per_sequence=5, repeats=2)
        train, val = split_train_val(corpus, 4, seed=1)
        assert len(val) == 4 and len(train) == len(corpus) - 4
        assert not {s.name for s in train} & {s.name for s in val}
        save_split(train, val, tmp_path / "split.json")
        assert load_split(tmp_path / "split.json")["val"] == [s.name for s in val]

    def test_same_seed_same_split(self):
        corpus = default_corpus(0, frames_per_sequence=5, repeats=2)
        assert [s.name for s in split_train_val(corpus, 3, 7)[1]] == [s.name for s in split_train_val(corpus, 3, 7)[1]]
