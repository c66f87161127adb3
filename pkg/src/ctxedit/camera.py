"""2D crop-zoom "camera" encoded in 3x4 extrinsics.

A pose is an in-plane rotation (degrees), a zoom factor and an integer pan.
It is stored as ``[R | t]`` with ``R`` the rotation about the optical axis and
``t = (pan_x, pan_y, zoom - 1)``, so the identity pose is ``[I | 0]`` and the
rotation block stays orthonormal.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import DegenerateFrame, DimensionError

PAN_RANGE = tuple(range(-4, 5))
ZOOMS = (0.75, 1.0, 1.25)
ROTATIONS = (-15.0, 0.0, 15.0)


@dataclass(frozen=True)
class Pose:
    rotation: float = 0.0
    zoom: float = 1.0
    pan_x: float = 0.0
    pan_y: float = 0.0

    def extrinsic(self) -> np.ndarray:
        a = np.deg2rad(self.rotation)
        c, s = np.cos(a), np.sin(a)
        return np.array(
            [[c, -s, 0.0, self.pan_x],
             [s, c, 0.0, self.pan_y],
             [0.0, 0.0, 1.0, self.zoom - 1.0]],
            dtype=np.float64,
        )

    @classmethod
    def from_extrinsic(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 4):
            raise DimensionError(f"extrinsic must be 3x4, got {m.shape}")
        rot = round(float(np.rad2deg(np.arctan2(m[1, 0], m[0, 0]))), 9)
        return cls(rot + 0.0, round(float(m[2, 3] + 1.0), 12), float(m[0, 3]), float(m[1, 3]))


IDENTITY = Pose()


@functools.lru_cache(maxsize=1)
def _default_grid() -> tuple[Pose, ...]:
    return tuple(pose_grid())


def pose_grid() -> list[Pose]:
    """Every pose on the discrete search grid, simplest poses first."""
    poses = [Pose(r, z, px, py) for r, z, px, py in itertools.product(ROTATIONS, ZOOMS, PAN_RANGE, PAN_RANGE)]
    poses.sort(key=lambda p: (abs(p.rotation), abs(p.zoom - 1.0), abs(p.pan_x) + abs(p.pan_y), p.rotation,
                              p.zoom, p.pan_x, p.pan_y))
    return poses


def trajectory_to_array(poses) -> np.ndarray:
    return np.stack([p.extrinsic() for p in poses]).astype(np.float64)


def trajectory_from_array(arr: np.ndarray) -> list[Pose]:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[1:] != (3, 4):
        raise DimensionError(f"trajectory must be F x 3 x 4, got {arr.shape}")
    return [Pose.from_extrinsic(m) for m in arr]


def check_rotation_blocks(arr: np.ndarray, tol: float = 1e-6) -> bool:
    r = np.asarray(arr, dtype=np.float64)[:, :, :3]
    eye = np.eye(3)
    return bool(np.all(np.abs(np.einsum("fij,fkj->fik", r, r) - eye) < tol))


def save_trajectory_text(path, arr: np.ndarray) -> None:
    """Plain text, one pose per line, 12 numbers in row-major order."""
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 12)
    with open(path, "w") as fh:
        for row in arr:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_trajectory_text(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 12:
                raise DimensionError(f"expected 12 numbers per line, got {len(vals)}")
            rows.append(vals)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3, 4)


def _sample_coords(poses, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    rot = np.deg2rad(np.array([p.rotation for p in poses]))[:, None, None]
    inv_zoom = np.array([1.0 / p.zoom for p in poses])[:, None, None]
    px = np.array([p.pan_x for p in poses])[:, None, None]
    py = np.array([p.pan_y for p in poses])[:, None, None]
    c, s = np.cos(rot), np.sin(rot)
    sx = inv_zoom * (c * xs - s * ys) + cx + px
    sy = inv_zoom * (s * xs + c * ys) + cy + py
    return sx, sy


def _bilinear_taps(poses, h: int, w: int):
    sx, sy = _sample_coords(poses, h, w)
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, fx, fy


def _interp_matrix(taps, h: int, w: int) -> sparse.csr_matrix:
    """Sparse ``(P*H*W, H*W)`` matrix applying the bilinear taps to a flat frame."""
    x0, x1, y0, y1, fx, fy = taps
    n = x0.size
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1).reshape(-1)
    vals = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1).reshape(-1)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, h * w))


@functools.lru_cache(maxsize=8)
def _grid_matrix(h: int, w: int) -> sparse.csr_matrix:
    return _interp_matrix(_bilinear_taps(pose_grid(), h, w), h, w)


def _gather(frame: np.ndarray, taps) -> np.ndarray:
    x0, x1, y0, y1, fx, fy = taps
    f = frame.astype(np.float64)
    v00, v01 = f[:, y0, x0], f[:, y0, x1]
    v10, v11 = f[:, y1, x0], f[:, y1, x1]
    out = (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy
    return np.moveaxis(out, 0, 1)  # (P, 3, H, W)


def resample_many(frame: np.ndarray, poses) -> np.ndarray:
    """Bilinear, edge-clamped view of one ``(3, H, W)`` frame under each pose."""
    _, h, w = frame.shape
    return _gather(frame, _bilinear_taps(poses, h, w))


def resample_video(video: np.ndarray, poses) -> np.ndarray:
    """Apply one pose per frame to an ``(F, 3, H, W)`` video."""
    if len(poses) != video.shape[0]:
        raise DimensionError(f"{len(poses)} poses for {video.shape[0]} frames")
    return np.stack([resample_many(fr, [p])[0] for fr, p in zip(video, poses)]).astype(video.dtype)


def estimate_pose(output: np.ndarray, reference: np.ndarray, grid=None) -> Pose:
    """Grid pose whose view of ``reference`` best matches ``output`` in squared error."""
    if output.shape != reference.shape:
        raise DimensionError(f"frame shapes differ: {output.shape} vs {reference.shape}")
    if np.ptp(output) < 1e-6 or np.ptp(reference) < 1e-6:
        raise DegenerateFrame("uniform frame has no unique pose")
    c, h, w = reference.shape
    if grid is None:
        grid = _default_grid()
        views = _grid_matrix(h, w) @ reference.reshape(c, h * w).T.astype(np.float64)
        views = views.reshape(len(grid), h * w, c)
        target = output.reshape(c, h * w).T.astype(np.float64)[None]
        err = ((views - target) ** 2).sum(axis=(1, 2))
    else:
        views = resample_many(reference, grid)
        err = ((views - output[None].astype(np.float64)) ** 2).sum(axis=(1, 2, 3))
    return grid[int(np.argmin(err))]


@dataclass
class TrajectoryError:
    rot_err: float
    trans_err: float
    zoom_err: float
    frames: int
    degenerate: list[int]


def trajectory_error(output: np.ndarray, reference: np.ndarray, gt) -> TrajectoryError:
    """Mean absolute rotation (deg) and mean pan distance (px) over usable frames."""
    if output.shape != reference.shape:
        raise DimensionError(f"video shapes differ: {output.shape} vs {reference.shape}")
    if isinstance(gt, np.ndarray):
        gt = trajectory_from_array(gt)
    if len(gt) != output.shape[0]:
        raise DimensionError("trajectory length does not match frame count")
    grid = None
    rot, trans, zoom, bad = [], [], [], []
    for f, (o, r, g) in enumerate(zip(output, reference, gt)):
        try:
            est = estimate_pose(o, r, grid)
        except DegenerateFrame:
            bad.append(f)
            continue
        rot.append(abs(est.rotation - g.rotation))
        trans.append(float(np.hypot(est.pan_x - g.pan_x, est.pan_y - g.pan_y)))
        zoom.append(abs(est.zoom - g.zoom))
    if not rot:
        return TrajectoryError(float("nan"), float("nan"), float("nan"), 0, bad)
    return TrajectoryError(float(np.mean(rot)), float(np.mean(trans)), float(np.mean(zoom)), len(rot), bad)


def random_trajectory(rng: np.random.Generator, frames: int) -> list[Pose]:
    """Constant rotation/zoom with an integer pan ramping linearly from zero."""
    rot = float(rng.choice(ROTATIONS))
    zoom = float(rng.choice(ZOOMS))
    ex, ey = (int(v) for v in rng.integers(-4, 5, size=2))
    poses = []
    for f in range(frames):
        a = f / (frames - 1) if frames > 1 else 0.0
        poses.append(Pose(rot, zoom, float(round(ex * a)), float(round(ey * a))))
    return poses
