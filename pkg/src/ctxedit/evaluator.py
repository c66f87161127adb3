"""Toy-scale metric analogues, benchmark evaluation and the D1..D4 comparison.

Pretrained-feature metrics are replaced by exact geometric analogues:
off-mask PSNR and masked-region error for ID edits, a palette distance for
stylization, and pose-search trajectory error for camera re-rendering.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from scipy import stats

from . import camera
from .errors import ManifestMismatch, SeedMismatch
from .flow import SamplerConfig, sample_ode
from .layout import TaskKind
from .synthetic import EditSample, apply_palette, load_sample, read_manifest
from .tensorio import file_sha256

TIE_TOL = 1e-9
# one rotation grid step (15 deg) and one zoom grid step (0.25) each count as one pixel of pan
ROT_STEP = 15.0
ZOOM_STEP = 0.25


def psnr(mse: float) -> float:
    """PSNR in dB for [0, 1] pixels; ``inf`` marks an exact match."""
    return math.inf if mse <= 0 else float(-10.0 * math.log10(mse))


def pixel_errors(output: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel squared error averaged over channels, ``(F, H, W)``."""
    return ((output.astype(np.float64) - target.astype(np.float64)) ** 2).mean(axis=1)


def masked_error(output: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    err = pixel_errors(output, target)
    return float(err[mask].mean()) if mask.any() else 0.0


def offmask_mse(output: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    err = pixel_errors(output, target)
    keep = ~mask
    return float(err[keep].mean()) if keep.any() else 0.0


def palette_distance(output: np.ndarray, target: np.ndarray) -> float:
    """Mean over RGB of the 1-D Wasserstein distance between pixel-value distributions."""
    out = np.moveaxis(output, 1, 0).reshape(3, -1)
    tgt = np.moveaxis(target, 1, 0).reshape(3, -1)
    return float(np.mean([stats.wasserstein_distance(o, t) for o, t in zip(out, tgt)]))


def smoothness(video: np.ndarray) -> float:
    if video.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(video.astype(np.float64), axis=0)).mean())


def pose_error(err: camera.TrajectoryError) -> float:
    """Scalar trajectory error in pan-pixel units."""
    return err.trans_err + err.rot_err / ROT_STEP + err.zoom_err / ZOOM_STEP


def case_metrics(sample: EditSample, output: np.ndarray) -> dict[str, float]:
    """Every applicable metric for one benchmark case."""
    m: dict[str, float] = {"smoothness": smoothness(output)}
    if sample.mask is not None:
        m["masked_error"] = masked_error(output, sample.target, sample.mask)
        m["offmask_mse"] = offmask_mse(output, sample.target, sample.mask)
    if "palette" in sample.meta:
        m["palette_distance"] = palette_distance(output, sample.target)
    if "camera" in sample.conditions:
        source = sample.reference
        if "palette" in sample.meta:
            # composed edit: poses are measured against the restyled source
            source = apply_palette(sample.reference, int(sample.meta["palette"]))
        te = camera.trajectory_error(output, source, sample.conditions["camera"])
        if te.frames:
            m["rot_err"] = te.rot_err
            m["trans_err"] = te.trans_err
            m["zoom_err"] = te.zoom_err
            m["trajectory_error"] = pose_error(te)
        m["degenerate_frames"] = float(len(te.degenerate))
    return m


@dataclass
class Metric:
    value: float
    count: int

    def __str__(self) -> str:
        return f"{self.value:.4f} (n={self.count})"


def aggregate(per_case: Sequence[Mapping[str, float]]) -> dict[str, Metric]:
    """Mean of each metric over the cases reporting it; PSNR comes from the pooled off-mask MSE."""
    keys = sorted({k for m in per_case for k in m})
    out: dict[str, Metric] = {}
    for k in keys:
        vals = [m[k] for m in per_case if k in m]
        if k == "degenerate_frames":
            out[k] = Metric(float(np.sum(vals)), len(vals))
        else:
            out[k] = Metric(float(np.mean(vals)), len(vals))
    if "offmask_mse" in out:
        out["offmask_psnr"] = Metric(psnr(out["offmask_mse"].value), out["offmask_mse"].count)
    return out


@dataclass
class MetricReport:
    tasks: dict[str, dict[str, Metric]]
    seeds: dict[str, list[int]] = field(default_factory=dict)
    eval_seed: int = 0
    benchmark: str = ""
    analogue_note: str = "toy analogues: PSNR/masked error, palette distance, pose-search trajectory error"

    def get(self, task: str, metric: str) -> float:
        return self.tasks[task][metric].value

    def lines(self) -> list[str]:
        """Machine-readable records: ``task<TAB>metric<TAB>value<TAB>count``."""
        return [f"{task}\t{name}\t{m.value!r}\t{m.count}"
                for task in sorted(self.tasks) for name, m in sorted(self.tasks[task].items())]

    def table(self) -> str:
        names = sorted({n for t in self.tasks.values() for n in t})
        width = max([len(n) for n in names] + [12])
        head = "task".ljust(14) + "".join(n.rjust(width + 2) for n in names)
        rows = [head]
        for task in sorted(self.tasks):
            cells = []
            for n in names:
                m = self.tasks[task].get(n)
                cells.append(("-" if m is None else f"{m.value:.4f}").rjust(width + 2))
            rows.append(task.ljust(14) + "".join(cells))
        rows.append(f"# {self.analogue_note}")
        return "\n".join(rows)


def case_seed(eval_seed: int, sample: EditSample) -> int:
    """Sampler noise seed for one case; fixed by the eval seed and the case identity."""
    key = f"{eval_seed}:{sample.kind.value}:{sample.seed}:{sample.meta.get('composed', '')}".encode()
    return zlib.crc32(key)


def run_model(model, samples: Sequence[EditSample], sampler: SamplerConfig, eval_seed: int = 0,
              chunk: int = 32) -> list[np.ndarray]:
    """Decoded model outputs in pixel space, one per sample."""
    outs = []
    model.eval()
    for i in range(0, len(samples), chunk):
        part = samples[i: i + chunk]
        preps = [model.prepare(s) for s in part]
        lat = sample_ode(model, preps, sampler, seeds=[case_seed(eval_seed, s) for s in part])
        for s, z in zip(part, lat):
            video = model.codec.decode(z).numpy()
            outs.append(video[: s.frames])
    return outs


def evaluate_outputs(samples: Sequence[EditSample], outputs: Sequence[np.ndarray], eval_seed: int = 0,
                     benchmark: str = "") -> MetricReport:
    by_task: dict[str, list] = {}
    seeds: dict[str, list[int]] = {}
    for s, o in zip(samples, outputs):
        by_task.setdefault(s.kind.value, []).append(case_metrics(s, o))
        seeds.setdefault(s.kind.value, []).append(s.seed)
    return MetricReport({k: aggregate(v) for k, v in by_task.items()}, seeds, eval_seed, benchmark)


def load_benchmark(root, kinds: Optional[Iterable[TaskKind]] = None) -> list[EditSample]:
    """Load and checksum every case listed in ``root/manifest.txt``."""
    root = Path(root)
    entries = read_manifest(root / "manifest.txt")
    wanted = None if kinds is None else {TaskKind(k) for k in kinds}
    out = []
    for e in entries:
        if wanted is not None and e.kind not in wanted:
            continue
        path = root / e.path
        if not path.exists():
            raise ManifestMismatch(f"manifest lists missing file {e.path}")
        if file_sha256(path) != e.checksum:
            raise ManifestMismatch(f"checksum mismatch for {e.path}")
        s = load_sample(path)
        if s.kind != e.kind or s.seed != e.seed:
            raise ManifestMismatch(f"{e.path} holds {s.kind.value}/{s.seed}, manifest says {e.kind.value}/{e.seed}")
        out.append(s)
    return out


def eval_checkpoint(model, benchmark, sampler: Optional[SamplerConfig] = None, eval_seed: int = 0,
                    kinds: Optional[Iterable[TaskKind]] = None) -> MetricReport:
    """Sample every benchmark case with a fixed seed and score against ground truth.

    ``benchmark`` is a directory with a manifest or an in-memory list of samples.
    """
    sampler = sampler or SamplerConfig()
    if isinstance(benchmark, (str, Path)):
        name = str(benchmark)
        samples = load_benchmark(benchmark, kinds)
    else:
        name = "in-memory"
        samples = [s for s in benchmark if kinds is None or s.kind in set(kinds)]
    with torch.no_grad():
        outputs = run_model(model, samples, sampler, eval_seed)
    return evaluate_outputs(samples, outputs, eval_seed, name)


def baseline_report(samples: Sequence[EditSample]) -> MetricReport:
    """Metrics of the do-nothing model whose output is the unedited reference."""
    return evaluate_outputs(samples, [s.reference for s in samples], benchmark="identity")


# --- ablation verdicts --------------------------------------------------------------------------

@dataclass
class Claim:
    name: str
    lhs: str
    rhs: str
    lhs_value: float
    rhs_value: float
    passed: bool
    tie: bool

    def line(self) -> str:
        status = "PASS" if self.passed else ("FAIL (tie)" if self.tie else "FAIL")
        return f"{self.name}: {self.lhs}={self.lhs_value:.4f} < {self.rhs}={self.rhs_value:.4f} -> {status}"


@dataclass
class AblationVerdict:
    claims: list[Claim]
    numbers: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.claims)


def _less(name: str, lhs: str, rhs: str, a: float, b: float) -> Claim:
    tie = abs(a - b) <= TIE_TOL * max(1.0, abs(a), abs(b))
    return Claim(name, lhs, rhs, a, b, (a < b) and not tie, tie)


def compare_ablations(reports: Mapping[str, MetricReport], task: str = TaskKind.RECAMERA.value,
                      metric: str = "trajectory_error") -> AblationVerdict:
    """Directional claims: D4 and D3 each have lower trajectory error than D1."""
    names = ("D1", "D2", "D3", "D4")
    missing = [n for n in names if n not in reports]
    if missing:
        raise KeyError(f"missing ablation reports: {missing}")
    ref = reports["D1"]
    for n in names[1:]:
        r = reports[n]
        if r.seeds != ref.seeds or r.eval_seed != ref.eval_seed:
            raise SeedMismatch(f"{n} was evaluated on different benchmark seeds than D1")
    numbers = {n: reports[n].get(task, metric) for n in names}
    claims = [
        _less("full model beats baseline", "D4", "D1", numbers["D4"], numbers["D1"]),
        _less("task-aware indexing beats baseline", "D3", "D1", numbers["D3"], numbers["D1"]),
    ]
    return AblationVerdict(claims, numbers)


# --- visual dumps -------------------------------------------------------------------------------

def strip_frames(*videos: np.ndarray, scale: int = 4) -> list[np.ndarray]:
    """Side-by-side uint8 frames of equally long videos, upscaled by ``scale``."""
    frames = []
    for f in range(min(v.shape[0] for v in videos)):
        row = np.concatenate([np.moveaxis(v[f], 0, -1) for v in videos], axis=1)
        row = np.repeat(np.repeat(row, scale, axis=0), scale, axis=1)
        frames.append((np.clip(row, 0, 1) * 255 + 0.5).astype(np.uint8))
    return frames


def save_gif(path, *videos: np.ndarray, scale: int = 4, duration_ms: int = 150) -> None:
    from PIL import Image

    imgs = [Image.fromarray(f).quantize(colors=256) for f in strip_frames(*videos, scale=scale)]
    imgs[0].save(path, save_all=True, append_images=imgs[1:], duration=duration_ms, loop=0)
