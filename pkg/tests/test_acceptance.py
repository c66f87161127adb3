"""Acceptance criteria, one PASS/FAIL line each (printed in the terminal summary).

The training-backed criteria share session-scoped checkpoints. Set
``CTXEDIT_ACCEPTANCE_CACHE`` to a directory to keep them between runs; a
cached checkpoint is reused only when its configuration fingerprint matches.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import TINY, randomize
from ctxedit import config as config_mod
from ctxedit.backbone import DiTConfig
from ctxedit.evaluator import baseline_report, case_seed, compare_ablations, eval_checkpoint
from ctxedit.flow import SamplerConfig, euler_integrate, fm_loss, interpolate, sample_ode
from ctxedit.layout import (CAMERA, FIRST_FRAME, ID_IMAGES, SOFT_REFERENCE, STYLE_IMAGE, TASK_CONDITIONS, TaskKind,
                            default_registry, plan_indices, validate_plan)
from ctxedit.model import EditModel
from ctxedit.synthetic import (benchmark_seeds, composed_twins, generate_composed, generate_sample, load_sample,
                               make_benchmark, save_sample, write_dataset)
from ctxedit.tensorio import load_tensor, save_tensor
from ctxedit.trainer import (Phase, ProceduralSource, TrainSchedule, ablation_configs, init_state, joint,
                             load_checkpoint, save_checkpoint, train)

RESULTS: dict[int, tuple[bool, str]] = {}
TITLES = {
    1: "index-plan soundness",
    2: "zero-init bias neutrality",
    3: "flow-matching correctness",
    4: "sampler consistency",
    5: "toy task learnability",
    6: "D1..D4 directional ablation",
    7: "hard-to-easy beats joint",
    8: "task composition",
    9: "serialization round-trips",
}
ABLATION_TASKS = (TaskKind.RECAMERA, TaskKind.ID_INSERT, TaskKind.ID_SWAP, TaskKind.ID_DELETE)
ABLATION_FRAMES = (4, 6, 8)


def record(number: int, passed: bool, detail: str) -> None:
    RESULTS[number] = (passed, detail)
    assert passed, detail


def summary_lines() -> list[str]:
    lines = []
    for n in sorted(TITLES):
        if n not in RESULTS:
            lines.append(f"criterion {n} ({TITLES[n]}): NOT RUN")
            continue
        ok, detail = RESULTS[n]
        lines.append(f"criterion {n} ({TITLES[n]}): {'PASS' if ok else 'FAIL'} | {detail}")
    return lines


# --- shared trained checkpoints -----------------------------------------------------------------

def _fingerprint(*parts) -> str:
    blob = json.dumps([p if isinstance(p, (str, int, float, list, dict)) else repr(p) for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _trained(name: str, mcfg: DiTConfig, schedule: TrainSchedule, tcfg):
    """Train (or load a matching cached run) and return ``(state, cpu_seconds)``."""
    key = _fingerprint(name, mcfg.to_dict(), schedule.to_dict(), tcfg.to_dict())
    cache = os.environ.get("CTXEDIT_ACCEPTANCE_CACHE")
    path = Path(cache) / f"{name}_{key}.cxck" if cache else None
    if path is not None and path.exists():
        meta = json.loads(path.with_suffix(".json").read_text())
        return load_checkpoint(path), meta["cpu_seconds"]
    state = init_state(mcfg, schedule, tcfg)
    start = time.process_time()
    train(state, ProceduralSource(tcfg.height, tcfg.width, tcfg.frames))
    cpu = time.process_time() - start
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, state)
        path.with_suffix(".json").write_text(json.dumps({"cpu_seconds": cpu}))
    return state, cpu


@pytest.fixture(scope="session")
def defaults():
    return config_mod.Config()


@pytest.fixture(scope="session")
def curriculum(defaults):
    return _trained("curriculum", defaults.model, defaults.schedule(), defaults.train_config())


@pytest.fixture(scope="session")
def joint_run(defaults, curriculum):
    state, _ = curriculum
    return _trained("joint", defaults.model, joint(state.schedule.total_steps), defaults.train_config())


@pytest.fixture(scope="session")
def benchmark(defaults, tmp_path_factory):
    d = defaults.data
    root = tmp_path_factory.mktemp("benchmark")
    make_benchmark(d.benchmark_seed, root, (), d.height, d.width, d.frames, d.benchmark_per_task,
                   [TaskKind.ID_DELETE, TaskKind.STYLIZATION, TaskKind.RECAMERA])
    return root


@pytest.fixture(scope="session")
def curriculum_report(curriculum, benchmark, defaults):
    state, _ = curriculum
    return eval_checkpoint(state.model, benchmark, defaults.sampler(), defaults.sample.seed)


# --- 1 ------------------------------------------------------------------------------------------

def test_criterion_1_index_plans():
    reg = default_registry()
    start = time.perf_counter()
    bad = []
    for n in range(1, reg.max_latent_len + 1):
        for task in TaskKind:
            for other in TaskKind:
                plan = plan_indices(task, TASK_CONDITIONS[other], n, reg)
                if not validate_plan(plan).ok:
                    bad.append((n, task.value, other.value))
    elapsed = time.perf_counter() - start

    def frames(task, role, n=6):
        return list(plan_indices(task, [], n, reg).segment(role).indices)

    # worked example at six latent frames
    worked_example = (frames(TaskKind.ID_INSERT, ID_IMAGES) == [106, 107, 108]
                and frames(TaskKind.STYLIZATION, STYLE_IMAGE) == [206]
                and frames(TaskKind.RECAMERA, SOFT_REFERENCE) == list(range(300, 306))
                and frames(TaskKind.PROPAGATION, FIRST_FRAME) == [1])
    general = all(frames(TaskKind.ID_SWAP, ID_IMAGES, n) == [n + 100, n + 101, n + 102]
                  and frames(TaskKind.STYLIZATION, STYLE_IMAGE, n) == [n + 200]
                  and frames(TaskKind.RECAMERA, SOFT_REFERENCE, n) == list(range(300, 300 + n))
                  for n in range(1, 65))
    ok = not bad and worked_example and general and elapsed < 5.0
    record(1, ok, f"{64 * 36} plans, {len(bad)} invalid, worked_example={worked_example}, formula={general}, {elapsed:.2f}s")


# --- 2 ------------------------------------------------------------------------------------------

def test_criterion_2_bias_neutrality():
    torch.manual_seed(0)
    model = EditModel(DiTConfig(), default_registry())
    start = time.perf_counter()
    samples = [generate_sample(k, 5, frames=3) for k in TaskKind]
    preps = [model.prepare(s) for s in samples]
    x = [torch.randn(p.x1.shape, generator=torch.Generator().manual_seed(i)) for i, p in enumerate(preps)]
    t = torch.full((len(preps),), 0.3)
    with torch.no_grad():
        with_bias = model.velocity(preps, x, t)
        model.cfg.condition_bias = False
        without = model.velocity(preps, x, t)
        model.cfg.condition_bias = True
    elapsed = time.perf_counter() - start
    same = all(torch.equal(a, b) for a, b in zip(with_bias, without))
    zero = bool((model.bias.weight == 0).all())
    record(2, same and zero and elapsed < 1.0, f"bitwise equal={same}, table all zero={zero}, {elapsed:.2f}s")


# --- 3 ------------------------------------------------------------------------------------------

def _fd_relative_error(model, preps, eps=1e-5, per_param=3):
    """Relative error over all sampled coordinates, plus the worst single tensor for reference."""
    from ctxedit.flow import flow_loss, training_step

    gen = np.random.default_rng(0)
    _, _, grads = training_step(model, preps, torch.Generator().manual_seed(7))
    num, ana, worst = [], [], 0.0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        n_p, a_p = [], []
        for i in gen.choice(flat.numel(), size=min(per_param, flat.numel()), replace=False):
            old = flat[i].item()
            flat[i] = old + eps
            plus = flow_loss(model, preps, torch.Generator().manual_seed(7))[0].item()
            flat[i] = old - eps
            minus = flow_loss(model, preps, torch.Generator().manual_seed(7))[0].item()
            flat[i] = old
            n_p.append((plus - minus) / (2 * eps))
            a_p.append(grads[name].view(-1)[i].item())
        n_p, a_p = np.array(n_p), np.array(a_p)
        worst = max(worst, float(np.linalg.norm(n_p - a_p) / max(np.linalg.norm(n_p), np.linalg.norm(a_p), 1e-12)))
        num.extend(n_p)
        ana.extend(a_p)
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana))), worst


def test_criterion_3_flow_matching():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(4, 16, 4, 4, generator=g, dtype=torch.float64)
    x1 = torch.randn(4, 16, 4, 4, generator=g, dtype=torch.float64)
    endpoints = torch.equal(interpolate(x0, x1, 0.0), x0) and torch.equal(interpolate(x0, x1, 1.0), x1)
    v = torch.randn(4, 16, 4, 4, generator=g, dtype=torch.float64)
    oracle = float(np.mean((v.numpy() - (x1.numpy() - x0.numpy())) ** 2))
    loss_err = abs(fm_loss(v, x0, x1).item() - oracle)

    torch.manual_seed(0)
    model = EditModel(DiTConfig(**TINY), default_registry()).double()
    randomize(model, std=0.2)
    preps = [model.prepare(generate_sample(k, 2, frames=2)) for k in (TaskKind.RECAMERA, TaskKind.ID_INSERT)]
    for p in preps:
        p.x1, p.z_ref = p.x1.double(), p.z_ref.double()
        p.static = {k: val.double() for k, val in p.static.items()}
        p.camera = None if p.camera is None else p.camera.double()
    fd, fd_worst = _fd_relative_error(model, preps)
    elapsed = time.perf_counter() - start
    ok = endpoints and loss_err < 1e-12 and fd < 1e-4 and elapsed < 120
    record(3, ok, f"endpoints={endpoints}, |loss-oracle|={loss_err:.1e}, fd rel err={fd:.1e} "
                  f"(worst tensor {fd_worst:.1e}), {elapsed:.1f}s")


# --- 4 ------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_sampler(curriculum, defaults):
    start = time.perf_counter()
    g = torch.Generator().manual_seed(2)
    x0 = torch.randn(3, 16, 4, 4, generator=g, dtype=torch.float64)
    x1 = torch.randn(3, 16, 4, 4, generator=g, dtype=torch.float64)
    oracle_err = (euler_integrate(lambda x, t: x1 - x0, x0, 50) - x1).abs().max().item()

    state, _ = curriculum
    model = state.model
    d = defaults.data
    kinds = [TaskKind.ID_DELETE, TaskKind.STYLIZATION, TaskKind.RECAMERA, TaskKind.ID_INSERT, TaskKind.PROPAGATION]
    cases = [generate_sample(k, s, d.height, d.width, d.frames[0]) for k, s in zip(kinds, benchmark_seeds(7, 5))]
    preps = [model.prepare(c) for c in cases]
    seeds = [case_seed(11, c) for c in cases]
    with torch.no_grad():
        ref = sample_ode(model, preps, SamplerConfig(512), seeds)
        devs = []
        for steps in (8, 16, 32, 64):
            out = sample_ode(model, preps, SamplerConfig(steps), seeds)
            devs.append([float((o - r).pow(2).mean().sqrt()) for o, r in zip(out, ref)])
    devs = np.array(devs)  # (step counts, seeds)
    monotone = bool((np.diff(devs, axis=0) < 0).all())
    elapsed = time.perf_counter() - start
    ok = oracle_err < 1e-6 and monotone and elapsed < 120
    table = "; ".join(",".join(f"{x:.4f}" for x in col) for col in devs.T)
    record(4, ok, f"oracle err={oracle_err:.1e}, monotone on 5 seeds={monotone} [{table}], {elapsed:.1f}s")


# --- 5 ------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_learnability(curriculum, curriculum_report, benchmark):
    from ctxedit.evaluator import load_benchmark

    state, cpu = curriculum
    base = baseline_report(load_benchmark(benchmark))
    rep = curriculum_report
    om_psnr = rep.get("id_delete", "offmask_psnr")
    masked, masked_base = rep.get("id_delete", "masked_error"), base.get("id_delete", "masked_error")
    pal, pal_base = rep.get("stylization", "palette_distance"), base.get("stylization", "palette_distance")
    checks = {
        "budget": cpu <= 30 * 60,
        "offmask_psnr": om_psnr >= 25.0,
        "masked": masked < 0.5 * masked_base,
        "palette": pal < 0.5 * pal_base,
    }
    detail = (f"train {cpu / 60:.1f} CPU-min, off-mask PSNR {om_psnr:.2f} dB (>= 25), masked error "
              f"{masked:.4f} vs 0.5 x {masked_base:.4f}, palette {pal:.4f} vs 0.5 x {pal_base:.4f}; "
              f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    record(5, all(checks.values()), detail)


@pytest.mark.slow
def test_trained_model_reads_its_conditions(curriculum, defaults):
    """Swapping the style swatch steers a trained model's output for the same noise."""
    state, _ = curriculum
    model = state.model
    d = defaults.data
    base = generate_composed(123, d.height, d.width, d.frames[0], palette=0)
    _, a = composed_twins(base)
    _, b = composed_twins(generate_composed(123, d.height, d.width, d.frames[0], palette=1))
    assert np.array_equal(a.reference, b.reference) and not np.array_equal(a.target, b.target)
    with torch.no_grad():
        out = sample_ode(model, [model.prepare(a), model.prepare(b)], SamplerConfig(20), [5, 5])
    va, vb = (model.codec.decode(o).numpy() for o in out)
    # each output is closer to its own target than to the other one
    assert np.mean((va - a.target) ** 2) < np.mean((va - b.target) ** 2)
    assert np.mean((vb - b.target) ** 2) < np.mean((vb - a.target) ** 2)


# --- 6 ------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_ablation(defaults, curriculum):
    _, curriculum_cpu = curriculum
    steps = defaults.train.steps_per_phase * 3 // 2
    schedule = TrainSchedule("recamera_id_mixture", (Phase(ABLATION_TASKS, steps),))
    tcfg = defaults.train_config()
    tcfg.frames = ABLATION_FRAMES
    d = defaults.data
    seeds = benchmark_seeds(d.benchmark_seed + 1, d.benchmark_per_task)
    cases = [generate_sample(TaskKind.RECAMERA, s, d.height, d.width, ABLATION_FRAMES[i % 3])
             for i, s in enumerate(seeds)]
    reports, cpu = {}, 0.0
    for name, mcfg in ablation_configs(defaults.model).items():
        state, spent = _trained(f"ablation_{name}", mcfg, schedule, tcfg)
        cpu += spent
        reports[name] = eval_checkpoint(state.model, cases, defaults.sampler(), defaults.sample.seed)
    verdict = compare_ablations(reports)
    within = cpu <= 4 * max(curriculum_cpu, 1.0)
    nums = ", ".join(f"{k}={v:.3f}" for k, v in verdict.numbers.items())
    claims = "; ".join(c.line() for c in verdict.claims)
    record(6, verdict.passed and within, f"trajectory error {nums}; {claims}; {cpu / 60:.1f} CPU-min total")


# --- 7 ------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_curriculum_order(curriculum, joint_run, benchmark, curriculum_report, defaults):
    h2e_state, _ = curriculum
    joint_state, _ = joint_run
    same_budget = h2e_state.schedule.total_steps == joint_state.schedule.total_steps
    joint_report = eval_checkpoint(joint_state.model, benchmark, defaults.sampler(), defaults.sample.seed)
    h2e = curriculum_report.get("recamera", "trajectory_error")
    jnt = joint_report.get("recamera", "trajectory_error")
    tie = abs(h2e - jnt) <= 1e-9 * max(1.0, abs(h2e), abs(jnt))
    ok = same_budget and h2e < jnt and not tie
    record(7, ok, f"ReCamera trajectory error hard_to_easy={h2e:.4f} vs joint={jnt:.4f} "
                  f"at {h2e_state.schedule.total_steps} steps each{' (tie)' if tie else ''}")


# --- 8 ------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_composition(curriculum, defaults):
    state, _ = curriculum
    d = defaults.data
    seeds = benchmark_seeds(d.benchmark_seed + 2, 5)
    frames = d.frames[0]
    composed = [generate_composed(s, d.height, d.width, frames) for s in seeds]
    # single-task twins share the scene, trajectory and palette of each composed case
    cams, styles = zip(*(composed_twins(c) for c in composed))
    sampler, eval_seed = defaults.sampler(), defaults.sample.seed
    comp = eval_checkpoint(state.model, composed, sampler, eval_seed).tasks["stylization"]
    cam = eval_checkpoint(state.model, cams, sampler, eval_seed).get("recamera", "trajectory_error")
    sty = eval_checkpoint(state.model, styles, sampler, eval_seed).get("stylization", "palette_distance")
    traj_ok = comp["trajectory_error"].value <= 2 * cam
    pal_ok = comp["palette_distance"].value <= 2 * sty
    record(8, traj_ok and pal_ok,
           f"composed trajectory {comp['trajectory_error'].value:.4f} vs 2 x {cam:.4f}, "
           f"composed palette {comp['palette_distance'].value:.4f} vs 2 x {sty:.4f} on 5 seeds")


# --- 9 ------------------------------------------------------------------------------------------

def _rewrite_equal(path: Path, load, save) -> bool:
    first = path.read_bytes()
    copy = path.with_name("again_" + path.name)
    save(copy, load(path))
    return copy.read_bytes() == first


def test_criterion_9_round_trips(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    save_tensor(tmp_path / "t.cxt", arr)
    tensor_ok = _rewrite_equal(tmp_path / "t.cxt", load_tensor, save_tensor)

    write_dataset(tmp_path / "data", [TaskKind.RECAMERA, TaskKind.ID_INSERT], range(3), frames=(2, 3))
    files = sorted((tmp_path / "data").rglob("*.cxs"))
    sample_ok = all(_rewrite_equal(f, load_sample, save_sample) for f in files)

    torch.manual_seed(0)
    state = init_state(DiTConfig(**TINY), joint(3), config_mod.Config().train_config())
    state.config.batch_size = 2
    train(state, until=2)
    save_checkpoint(tmp_path / "c.cxck", state)
    ckpt_ok = _rewrite_equal(tmp_path / "c.cxck", load_checkpoint, save_checkpoint)

    cfg = config_mod.Config()
    text = config_mod.dumps(cfg)
    config_ok = config_mod.dumps(config_mod.loads(text)) == text
    ok = tensor_ok and sample_ok and ckpt_ok and config_ok and len(files) == 6
    record(9, ok, f"tensor={tensor_ok}, dataset ({len(files)} files)={sample_ok}, checkpoint={ckpt_ok}, "
                  f"config={config_ok}")
