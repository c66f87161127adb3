import numpy as np
import pytest

from ctxedit import camera
from ctxedit.camera import Pose
from ctxedit.errors import DegenerateFrame, DimensionError
from ctxedit.synthetic import generate_sample
from ctxedit.layout import TaskKind


def test_identity_pose_extrinsic():
    np.testing.assert_array_equal(Pose().extrinsic(), np.hstack([np.eye(3), np.zeros((3, 1))]))


def test_extrinsic_roundtrip_on_grid():
    for p in camera.pose_grid()[::7]:
        assert Pose.from_extrinsic(p.extrinsic()) == p


def test_rotation_blocks_orthonormal():
    arr = camera.trajectory_to_array(camera.pose_grid())
    assert camera.check_rotation_blocks(arr)


def test_text_roundtrip(tmp_path):
    arr = camera.trajectory_to_array([Pose(15.0, 1.25, 2.0, -3.0), Pose()])
    camera.save_trajectory_text(tmp_path / "t.txt", arr)
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert len(lines) == 2 and all(len(l.split()) == 12 for l in lines)
    np.testing.assert_array_equal(camera.load_trajectory_text(tmp_path / "t.txt"), arr)


def test_integer_pan_is_a_shift():
    rng = np.random.default_rng(0)
    frame = rng.random((3, 16, 16))
    out = camera.resample_many(frame, [Pose(0.0, 1.0, 2.0, 1.0)])[0]
    np.testing.assert_allclose(out[:, 3:12, 4:13], frame[:, 4:13, 6:15], atol=1e-12)


def test_estimator_recovers_generating_poses():
    for seed in range(12):
        s = generate_sample(TaskKind.RECAMERA, seed)
        err = camera.trajectory_error(s.target, s.reference, s.conditions["camera"])
        assert err.rot_err == 0.0 and err.trans_err == 0.0 and not err.degenerate


def test_pan_offset_oracle():
    # shift every ground-truth pan by +2 px: the exhaustive search still finds the true pose
    s = generate_sample(TaskKind.RECAMERA, 3, trajectory=[Pose(0.0, 1.0, 0.0, 0.0)] * 8)
    shifted = [Pose(0.0, 1.0, 2.0, 0.0)] * 8
    err = camera.trajectory_error(s.target, s.reference, shifted)
    assert err.trans_err == pytest.approx(2.0)
    assert err.rot_err == 0.0


def test_identity_trajectory_zero_error():
    s = generate_sample(TaskKind.RECAMERA, 5, trajectory=[Pose()] * 8)
    np.testing.assert_array_equal(s.target, s.reference)
    err = camera.trajectory_error(s.reference, s.reference, [Pose()] * 8)
    assert (err.rot_err, err.trans_err) == (0.0, 0.0)


def test_uniform_frames_are_degenerate():
    gray = np.full((4, 3, 16, 16), 0.5, np.float32)
    ref = generate_sample(TaskKind.RECAMERA, 0, frames=4).reference
    with pytest.raises(DegenerateFrame):
        camera.estimate_pose(gray[0], ref[0])
    err = camera.trajectory_error(gray, ref, [Pose()] * 4)
    assert err.degenerate == [0, 1, 2, 3] and err.frames == 0


def test_default_grid_matches_explicit_search():
    s = generate_sample(TaskKind.RECAMERA, 11)
    grid = camera.pose_grid()
    for f in range(0, 8, 3):
        assert camera.estimate_pose(s.target[f], s.reference[f]) == camera.estimate_pose(
            s.target[f], s.reference[f], grid)


def test_bad_shapes():
    with pytest.raises(DimensionError):
        camera.trajectory_from_array(np.zeros((2, 4, 4)))
    with pytest.raises(DimensionError):
        camera.resample_video(np.zeros((3, 3, 8, 8)), [Pose()])
