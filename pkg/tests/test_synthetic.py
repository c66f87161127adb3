import numpy as np
import pytest

from ctxedit import camera
from ctxedit.errors import AlignmentError, DisjointnessError
from ctxedit.layout import STRICT_TASKS, TaskKind
from ctxedit.synthetic import (BENCHMARK_PER_TASK, apply_palette, benchmark_seeds, derive_propagation,
                               generate_composed, generate_sample, invert_palette, load_sample, make_benchmark,
                               read_manifest, save_sample, sprite_coverage)


def test_id_delete_seed7_off_mask_exact():
    s = generate_sample(TaskKind.ID_DELETE, 7)
    off = ~s.mask
    assert s.mask.any()
    np.testing.assert_array_equal(s.reference.transpose(1, 0, 2, 3)[:, off], s.target.transpose(1, 0, 2, 3)[:, off])


@pytest.mark.parametrize("kind", STRICT_TASKS)
def test_strict_alignment(kind):
    for seed in range(10):
        s = generate_sample(kind, seed)
        diff = np.any(s.reference != s.target, axis=1)
        assert not (diff & ~s.mask).any()


def test_stylization_inverse_is_exact():
    for seed in range(20):
        s = generate_sample(TaskKind.STYLIZATION, seed)
        np.testing.assert_array_equal(invert_palette(s.target, s.meta["palette"]), s.reference)


def test_recamera_identity_trajectory():
    s = generate_sample(TaskKind.RECAMERA, 4, trajectory=[camera.Pose()] * 8)
    np.testing.assert_array_equal(s.target, s.reference)


def test_recamera_ground_truth_resampling():
    for seed in range(5):
        s = generate_sample(TaskKind.RECAMERA, seed)
        poses = camera.trajectory_from_array(s.conditions["camera"])
        again = camera.resample_video(s.reference, poses)
        assert np.abs(again - s.target).mean() < 1e-6


def test_id_delete_conditions_empty():
    s = generate_sample(TaskKind.ID_DELETE, 1)
    assert s.conditions["id_images"].shape == (0, 3, 16, 16)


def test_generation_is_deterministic():
    a = generate_sample(TaskKind.ID_SWAP, 12)
    b = generate_sample(TaskKind.ID_SWAP, 12)
    np.testing.assert_array_equal(a.target, b.target)
    np.testing.assert_array_equal(a.conditions["id_images"], b.conditions["id_images"])


def test_derive_propagation_from_insert():
    pair = generate_sample(TaskKind.ID_INSERT, 3)
    fwd, rev = derive_propagation(pair)
    for p in (fwd, rev):
        assert p.kind is TaskKind.PROPAGATION
        assert p.conditions["first_frame"].tobytes() == p.target[0].tobytes()
    np.testing.assert_array_equal(fwd.reference, rev.target)


def test_derive_propagation_rejects_recamera():
    with pytest.raises(AlignmentError):
        derive_propagation(generate_sample(TaskKind.RECAMERA, 0))


@pytest.mark.parametrize("kind", list(TaskKind))
def test_sample_file_roundtrip(tmp_path, kind):
    s = generate_sample(kind, 21, frames=6)
    save_sample(tmp_path / "s.cxs", s)
    back = load_sample(tmp_path / "s.cxs")
    assert back.kind is s.kind and back.seed == s.seed and back.meta == s.meta
    np.testing.assert_array_equal(back.reference, s.reference)
    np.testing.assert_array_equal(back.target, s.target)
    if s.mask is None:
        assert back.mask is None
    else:
        np.testing.assert_array_equal(back.mask, s.mask)
    for key, val in s.conditions.items():
        if key == "text":
            assert back.conditions[key] == val
        else:
            np.testing.assert_array_equal(back.conditions[key], val)
    data = (tmp_path / "s.cxs").read_bytes()
    save_sample(tmp_path / "t.cxs", back)
    assert (tmp_path / "t.cxs").read_bytes() == data


def test_benchmark_counts_and_determinism(tmp_path):
    m1 = make_benchmark(0, tmp_path / "a", per_task=BENCHMARK_PER_TASK)
    m2 = make_benchmark(0, tmp_path / "b", per_task=BENCHMARK_PER_TASK)
    assert m1.read_bytes() == m2.read_bytes()
    assert len(read_manifest(m1)) == 6 * 20


def test_benchmark_refuses_overlap(tmp_path):
    seeds = benchmark_seeds(0)
    with pytest.raises(DisjointnessError):
        make_benchmark(0, tmp_path, train_seeds=[seeds[3]])


def test_composed_sample():
    s = generate_composed(5)
    poses = camera.trajectory_from_array(s.conditions["camera"])
    expect = camera.resample_video(apply_palette(s.reference, s.meta["palette"]), poses)
    np.testing.assert_array_equal(s.target, expect)
    assert set(s.conditions) >= {"style_image", "camera"}


def test_coverage_matches_mask_for_insert():
    s = generate_sample(TaskKind.ID_INSERT, 9)
    assert s.mask.shape == (8, 16, 16) and s.mask.dtype == bool
