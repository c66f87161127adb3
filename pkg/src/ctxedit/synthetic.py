"""Procedural edit triplets over a toy world of moving colored shapes."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import camera
from .errors import AlignmentError, DisjointnessError, FormatError
from .layout import STRICT_TASKS, TaskKind
from .tensorio import SAMPLE_MAGIC, read_container, write_container

SHAPES = ("circle", "square", "triangle")
# Multiples of 1/16 so palette inversion (1 - x) round-trips exactly in float32.
SPRITE_COLORS = np.array(
    [[15, 2, 2], [2, 14, 3], [3, 5, 15], [15, 14, 2], [14, 3, 14], [2, 14, 14]], dtype=np.float32) / 16
BACKGROUNDS = np.array([[2, 2, 2], [6, 5, 4], [4, 5, 7], [10, 10, 10]], dtype=np.float32) / 16

# Invertible palette remaps: a channel permutation followed by optional per-channel inversion.
PALETTES = (
    ((1, 2, 0), (False, False, False)),
    ((0, 1, 2), (True, True, True)),
    ((2, 1, 0), (False, True, False)),
    ((1, 0, 2), (True, False, True)),
)
KIND_CODES = {k: i for i, k in enumerate(TaskKind)}


@dataclass(frozen=True)
class Sprite:
    shape: str
    color: tuple[float, float, float]
    size: int
    x0: float
    y0: float
    vx: float
    vy: float

    def position(self, f: int) -> tuple[int, int]:
        return int(round(self.x0 + self.vx * f)), int(round(self.y0 + self.vy * f))


@dataclass(frozen=True)
class ToyScene:
    height: int
    width: int
    frames: int
    background: tuple[float, float, float]
    sprites: tuple[Sprite, ...]

    def fits(self) -> bool:
        for sp in self.sprites:
            for f in range(self.frames):
                x, y = sp.position(f)
                if x < 0 or y < 0 or x + sp.size > self.width or y + sp.size > self.height:
                    return False
        return True


@dataclass
class EditSample:
    kind: TaskKind
    reference: np.ndarray  # (F, 3, H, W) in [0, 1]
    target: np.ndarray
    conditions: dict = field(default_factory=dict)
    mask: Optional[np.ndarray] = None  # (F, H, W) bool; None where undefined
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.reference.shape[0]


def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    if shape == "circle":
        return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2 - 0.25
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        half = (yy + 1) * size / (2.0 * size)
        return np.abs(xx - c) <= half
    raise ValueError(f"unknown shape {shape!r}")


def sprite_coverage(sp: Sprite, h: int, w: int, frames: int) -> np.ndarray:
    cov = np.zeros((frames, h, w), dtype=bool)
    m = shape_mask(sp.shape, sp.size)
    for f in range(frames):
        x, y = sp.position(f)
        cov[f, y:y + sp.size, x:x + sp.size] |= m
    return cov


def render(scene: ToyScene) -> np.ndarray:
    video = np.empty((scene.frames, 3, scene.height, scene.width), dtype=np.float32)
    video[:] = np.asarray(scene.background, dtype=np.float32)[None, :, None, None]
    for sp in scene.sprites:
        cov = sprite_coverage(sp, scene.height, scene.width, scene.frames)
        col = np.asarray(sp.color, dtype=np.float32)
        for c in range(3):
            video[:, c][cov] = col[c]
    return video


def render_id_image(sp: Sprite, h: int, w: int) -> np.ndarray:
    """The sprite alone, centered on a black canvas, shape ``(3, H, W)``."""
    img = np.zeros((3, h, w), dtype=np.float32)
    y, x = (h - sp.size) // 2, (w - sp.size) // 2
    m = shape_mask(sp.shape, sp.size)
    for c in range(3):
        img[c, y:y + sp.size, x:x + sp.size][m] = sp.color[c]
    return img


def apply_palette(video: np.ndarray, palette: int) -> np.ndarray:
    """Remap channels (axis -3) of an image or video through a fixed palette."""
    perm, inv = PALETTES[palette]
    out = np.take(video, perm, axis=-3).copy()
    for c, flip in enumerate(inv):
        if flip:
            out[..., c, :, :] = 1.0 - out[..., c, :, :]
    return out


def invert_palette(video: np.ndarray, palette: int) -> np.ndarray:
    perm, inv = PALETTES[palette]
    tmp = video.copy()
    for c, flip in enumerate(inv):
        if flip:
            tmp[..., c, :, :] = 1.0 - tmp[..., c, :, :]
    return np.take(tmp, np.argsort(perm), axis=-3)


def palette_chart(h: int, w: int) -> np.ndarray:
    """Fixed stripe chart of every sprite and background color, ``(3, H, W)``."""
    colors = np.concatenate([SPRITE_COLORS, BACKGROUNDS])
    img = np.empty((3, h, w), dtype=np.float32)
    band = np.arange(w) * len(colors) // w
    img[:] = colors[band].T[:, None, :]
    return img


def style_swatch(palette: int, h: int, w: int) -> np.ndarray:
    return apply_palette(palette_chart(h, w), palette)


def _rng(seed: int, kind: TaskKind) -> np.random.Generator:
    return np.random.default_rng([int(seed), KIND_CODES[kind]])


def _random_sprite(rng: np.random.Generator, h: int, w: int, frames: int, size: int,
                   shape: Optional[str] = None, color: Optional[int] = None) -> Sprite:
    shape = shape or SHAPES[int(rng.integers(len(SHAPES)))]
    col = SPRITE_COLORS[int(rng.integers(len(SPRITE_COLORS))) if color is None else color]
    for _ in range(100):
        vx, vy = (float(v) for v in rng.uniform(-1.0, 1.0, size=2))
        x0 = float(rng.uniform(0, w - size))
        y0 = float(rng.uniform(0, h - size))
        sp = Sprite(shape, tuple(float(c) for c in col), size, x0, y0, vx, vy)
        if ToyScene(h, w, frames, (0, 0, 0), (sp,)).fits():
            return sp
    return Sprite(shape, tuple(float(c) for c in col), size, (w - size) / 2, (h - size) / 2, 0.0, 0.0)


def random_scene(rng: np.random.Generator, h: int, w: int, frames: int,
                 n_sprites: Optional[int] = None) -> ToyScene:
    """Up to three sprites with distinct sizes; the largest is listed first."""
    n = int(rng.integers(1, 4)) if n_sprites is None else n_sprites
    lo = max(2, h // 6)
    sizes = sorted(rng.choice(np.arange(lo, lo + 4), size=n, replace=False).tolist(), reverse=True)
    colors = rng.choice(len(SPRITE_COLORS), size=n, replace=False)
    sprites = tuple(_random_sprite(rng, h, w, frames, int(s), color=int(c)) for s, c in zip(sizes, colors))
    bg = tuple(float(c) for c in BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))])
    # the largest sprite is the edit subject and is drawn last so it is never occluded
    return ToyScene(h, w, frames, bg, sprites[1:] + sprites[:1])


def _subject(scene: ToyScene) -> Sprite:
    return scene.sprites[-1]


def _without_subject(scene: ToyScene) -> ToyScene:
    return replace(scene, sprites=scene.sprites[:-1])


def _prompt(kind: TaskKind, sp: Optional[Sprite] = None, palette: Optional[int] = None) -> str:
    if kind == TaskKind.ID_INSERT:
        return f"insert the {sp.shape}"
    if kind == TaskKind.ID_SWAP:
        return f"swap in the {sp.shape}"
    if kind == TaskKind.ID_DELETE:
        return "remove the largest shape"
    if kind == TaskKind.STYLIZATION:
        return f"restyle with palette {palette}"
    if kind == TaskKind.PROPAGATION:
        return "propagate the first frame edit"
    return "move the camera"


def _generate(kind: TaskKind, seed: int, h: int, w: int, frames: int,
              trajectory: Optional[list] = None) -> EditSample:
    rng = _rng(seed, kind)
    scene = random_scene(rng, h, w, frames)
    full = render(scene)
    subject = _subject(scene)
    meta: dict = {"height": h, "width": w}
    if kind == TaskKind.ID_INSERT:
        reference = render(_without_subject(scene))
        mask = sprite_coverage(subject, h, w, frames)
        conds = {"id_images": render_id_image(subject, h, w)[None], "text": _prompt(kind, subject)}
        return EditSample(kind, reference, full, conds, mask, seed, meta)
    if kind == TaskKind.ID_DELETE:
        target = render(_without_subject(scene))
        mask = sprite_coverage(subject, h, w, frames)
        conds = {"id_images": np.zeros((0, 3, h, w), np.float32), "text": _prompt(kind)}
        return EditSample(kind, full, target, conds, mask, seed, meta)
    if kind == TaskKind.ID_SWAP:
        others = [s for s in SHAPES if s != subject.shape]
        new_shape = others[int(rng.integers(len(others)))]
        used = {tuple(sp.color) for sp in scene.sprites}
        free = [i for i, c in enumerate(SPRITE_COLORS) if tuple(float(v) for v in c) not in used]
        new_color = SPRITE_COLORS[free[int(rng.integers(len(free)))]]
        swapped = replace(subject, shape=new_shape, color=tuple(float(c) for c in new_color))
        target = render(replace(scene, sprites=scene.sprites[:-1] + (swapped,)))
        mask = sprite_coverage(subject, h, w, frames) | sprite_coverage(swapped, h, w, frames)
        conds = {"id_images": render_id_image(swapped, h, w)[None], "text": _prompt(kind, swapped)}
        return EditSample(kind, full, target, conds, mask, seed, meta)
    if kind == TaskKind.STYLIZATION:
        palette = int(rng.integers(len(PALETTES)))
        target = apply_palette(full, palette)
        mask = np.any(target != full, axis=1)
        meta["palette"] = palette
        conds = {"style_image": style_swatch(palette, h, w), "text": _prompt(kind, palette=palette)}
        return EditSample(kind, full, target, conds, mask, seed, meta)
    if kind == TaskKind.RECAMERA:
        poses = trajectory if trajectory is not None else camera.random_trajectory(rng, frames)
        target = camera.resample_video(full, poses)
        conds = {"camera": camera.trajectory_to_array(poses), "text": _prompt(kind)}
        return EditSample(kind, full, target, conds, None, seed, meta)
    if kind == TaskKind.PROPAGATION:
        base_kind = STRICT_TASKS[int(rng.integers(4))]
        base = _generate(base_kind, seed, h, w, frames)
        fwd, rev = derive_propagation(base)
        out = fwd if rng.integers(2) == 0 else rev
        out.meta["base_kind"] = base_kind.value
        return out
    raise ValueError(f"unknown task {kind!r}")


def generate_sample(kind: TaskKind, seed: int, height: int = 16, width: int = 16, frames: int = 8,
                    trajectory: Optional[list] = None) -> EditSample:
    """Deterministic supervised triplet for one task."""
    kind = TaskKind(kind)
    if height % 4 or width % 4:
        raise ValueError("canvas dims must be divisible by 4")
    return _generate(kind, int(seed), height, width, frames, trajectory)


def derive_propagation(pair: EditSample) -> tuple[EditSample, EditSample]:
    """Forward and role-reversed propagation triplets from a strictly aligned pair."""
    if pair.kind not in STRICT_TASKS:
        raise AlignmentError(f"{pair.kind.value} is not a strict-alignment task")
    meta = dict(pair.meta)
    text = "propagate the first frame edit"
    fwd = EditSample(TaskKind.PROPAGATION, pair.reference.copy(), pair.target.copy(),
                     {"first_frame": pair.target[0].copy(), "text": text},
                     None if pair.mask is None else pair.mask.copy(), pair.seed, dict(meta, reversed=False))
    rev = EditSample(TaskKind.PROPAGATION, pair.target.copy(), pair.reference.copy(),
                     {"first_frame": pair.reference[0].copy(), "text": text},
                     None if pair.mask is None else pair.mask.copy(), pair.seed, dict(meta, reversed=True))
    return fwd, rev


# --- serialization ---------------------------------------------------------------------------

def _to_tensors(sample: EditSample) -> tuple[dict, dict]:
    header = {"kind": sample.kind.value, "seed": sample.seed, "meta": sample.meta,
              "text": sample.conditions.get("text", "")}
    tensors = {"reference": sample.reference.astype(np.float32), "target": sample.target.astype(np.float32)}
    if sample.mask is not None:
        tensors["mask"] = sample.mask.astype(np.uint8)
    for key in ("id_images", "style_image", "first_frame"):
        if key in sample.conditions:
            tensors[key] = np.asarray(sample.conditions[key], dtype=np.float32)
    if "camera" in sample.conditions:
        tensors["camera"] = np.asarray(sample.conditions["camera"], dtype=np.float64)
    return header, tensors


def save_sample(path, sample: EditSample) -> str:
    header, tensors = _to_tensors(sample)
    return write_container(path, SAMPLE_MAGIC, header, tensors)


def load_sample(path) -> EditSample:
    header, t = read_container(path, SAMPLE_MAGIC)
    conds: dict = {"text": header.get("text", "")}
    for key in ("id_images", "style_image", "first_frame", "camera"):
        if key in t:
            conds[key] = t[key]
    mask = t["mask"].astype(bool) if "mask" in t else None
    return EditSample(TaskKind(header["kind"]), t["reference"], t["target"], conds, mask,
                      int(header["seed"]), header.get("meta", {}))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    kind: TaskKind
    seed: int
    checksum: str

    def line(self) -> str:
        return f"{self.path}\t{self.kind.value}\t{self.seed}\t{self.checksum}"


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    Path(path).write_text("".join(e.line() + "\n" for e in entries))


def read_manifest(path) -> list[ManifestEntry]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"bad manifest line: {line!r}")
        out.append(ManifestEntry(parts[0], TaskKind(parts[1]), int(parts[2]), parts[3]))
    return out


def write_dataset(out_dir, kinds: Iterable[TaskKind], seeds: Iterable[int], height: int = 16,
                  width: int = 16, frames=(8,), manifest_name: str = "manifest.txt") -> Path:
    """Generate samples for every (kind, seed) and index them in a manifest.

    ``frames`` lists the allowed frame counts; each sample picks one from its seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = tuple(frames)
    entries = []
    seeds = list(seeds)
    for kind in kinds:
        kind = TaskKind(kind)
        (out_dir / kind.value).mkdir(exist_ok=True)
        for seed in seeds:
            f = frames[int(np.random.default_rng([seed, 99]).integers(len(frames)))]
            sample = generate_sample(kind, seed, height, width, f)
            rel = f"{kind.value}/{seed:07d}.cxs"
            digest = save_sample(out_dir / rel, sample)
            entries.append(ManifestEntry(rel, kind, seed, digest))
    manifest = out_dir / manifest_name
    write_manifest(manifest, entries)
    return manifest


BENCHMARK_PER_TASK = 20
BENCHMARK_SEED_BASE = 1_000_000


def benchmark_seeds(suite_seed: int, per_task: int = BENCHMARK_PER_TASK) -> list[int]:
    start = BENCHMARK_SEED_BASE + int(suite_seed) * 10_000
    return list(range(start, start + per_task))


def make_benchmark(suite_seed: int, out_dir, train_seeds: Iterable[int] = (), height: int = 16,
                   width: int = 16, frames=(8,), per_task: int = BENCHMARK_PER_TASK,
                   kinds: Iterable[TaskKind] = tuple(TaskKind)) -> Path:
    """Held-out evaluation set with seeds disjoint from ``train_seeds``."""
    seeds = benchmark_seeds(suite_seed, per_task)
    clash = set(seeds) & set(int(s) for s in train_seeds)
    if clash:
        raise DisjointnessError(f"{len(clash)} benchmark seeds overlap training seeds, e.g. {min(clash)}")
    return write_dataset(out_dir, kinds, seeds, height, width, frames)


def dataset_digest(manifest_path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()[:16]


def generate_composed(seed: int, height: int = 16, width: int = 16, frames: int = 8,
                      trajectory: Optional[list] = None, palette: Optional[int] = None) -> EditSample:
    """Stylization and camera re-render applied together to one scene.

    The target is the restyled scene viewed through the trajectory; conditions
    carry both the style swatch and the poses. ``meta["palette"]`` is set.
    """
    rng = np.random.default_rng([int(seed), len(KIND_CODES)])
    scene = random_scene(rng, height, width, frames)
    full = render(scene)
    pal = int(rng.integers(len(PALETTES))) if palette is None else int(palette)
    poses = trajectory if trajectory is not None else camera.random_trajectory(rng, frames)
    target = camera.resample_video(apply_palette(full, pal), poses)
    conds = {"style_image": style_swatch(pal, height, width), "camera": camera.trajectory_to_array(poses),
             "text": _prompt(TaskKind.STYLIZATION, palette=pal)}
    meta = {"height": height, "width": width, "palette": pal, "composed": ["stylization", "recamera"]}
    return EditSample(TaskKind.STYLIZATION, full, target, conds, None, int(seed), meta)


def composed_twins(sample: EditSample) -> tuple[EditSample, EditSample]:
    """ReCamera-only and Stylization-only cases sharing a composed case's scene, poses and palette."""
    full, pal = sample.reference, int(sample.meta["palette"])
    h, w = full.shape[-2:]
    poses = camera.trajectory_from_array(sample.conditions["camera"])
    meta = {"height": h, "width": w}
    cam = EditSample(TaskKind.RECAMERA, full, camera.resample_video(full, poses),
                     {"camera": sample.conditions["camera"], "text": _prompt(TaskKind.RECAMERA)},
                     None, sample.seed, dict(meta))
    styled = apply_palette(full, pal)
    sty = EditSample(TaskKind.STYLIZATION, full, styled,
                     {"style_image": style_swatch(pal, h, w), "text": _prompt(TaskKind.STYLIZATION, palette=pal)},
                     np.any(styled != full, axis=1), sample.seed, {**meta, "palette": pal})
    return cam, sty
