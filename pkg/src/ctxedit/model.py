"""Full editing model: frozen codec, condition tokenizers, bias table and DiT."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import (ConditionBiasTable, DiT, DiTConfig, TokenSequence, add_condition_bias,
                       assemble_sequence, collate, split_noisy)
from .layout import (CAMERA, FIRST_FRAME, ID_IMAGES, STYLE_IMAGE, TEXT, LayoutPlan, SlotRegistry, TaskKind,
                     plan_indices, plan_sequential)
from .synthetic import EditSample
from .tokenizers import CameraTokenizer, PatchCodec, TextTokenizer, tokenize_id_images

IMAGE_ROLES = (ID_IMAGES, STYLE_IMAGE, FIRST_FRAME)


def precondition_coeffs(t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Input scale, skip and output scale for unit-variance data and noise.

    ``c_skip * x_t`` is the best linear guess of the velocity from ``x_t`` and
    ``c_out`` is the standard deviation of what remains, so the network
    regresses a unit-variance residual at every ``t``.
    """
    var = t * t + (1 - t) * (1 - t)
    c_in = var.rsqrt()
    c_skip = (2 * t - 1) / var
    c_out = (2 - (2 * t - 1) ** 2 / var).sqrt()
    return c_in, c_skip, c_out


@dataclass
class PreparedSample:
    """Tokenizer-frozen view of an :class:`EditSample`, ready for the backbone."""

    kind: TaskKind
    plan: LayoutPlan
    x1: torch.Tensor  # target latent (N, C, h, w)
    z_ref: torch.Tensor
    static: dict = field(default_factory=dict)  # role -> latent grid for image conditions
    camera: Optional[torch.Tensor] = None  # (N, 3, 4)
    text_ids: Optional[torch.Tensor] = None
    height: int = 16
    width: int = 16
    seed: int = 0


class EditModel(nn.Module):
    def __init__(self, cfg: DiTConfig, registry: SlotRegistry, codec_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.registry = registry
        c = cfg.channels
        self.codec = PatchCodec(c, scale=cfg.latent_scale, seed=codec_seed)
        self.camera = CameraTokenizer(c)
        self.text = TextTokenizer(c, cfg.text_len, cfg.text_buckets)
        self.bias = ConditionBiasTable(registry.roles, c)
        self.dit = DiT(cfg)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- preparation ---------------------------------------------------------------------------
    def plan(self, kind: TaskKind, roles: Sequence[str], frames: int) -> LayoutPlan:
        fn = plan_sequential if self.cfg.rope_mode == "sequential" else plan_indices
        return fn(kind, roles, frames, self.registry, self.cfg.grid, self.cfg.text_len)

    @torch.no_grad()
    def prepare(self, sample: EditSample, use_text: bool = False) -> PreparedSample:
        conds = sample.conditions
        h, w = sample.reference.shape[-2:]
        x1 = self.codec.encode(sample.target)
        z_ref = self.codec.encode(sample.reference)
        roles = [r for r in (ID_IMAGES, STYLE_IMAGE, FIRST_FRAME, CAMERA) if r in conds]
        if use_text:
            roles.append(TEXT)
        plan = self.plan(sample.kind, roles, x1.shape[0])
        static = {}
        if ID_IMAGES in conds:
            static[ID_IMAGES] = tokenize_id_images(self.codec, conds[ID_IMAGES], h, w)
        for role in (STYLE_IMAGE, FIRST_FRAME):
            if role in conds:
                static[role] = self.codec.encode_image(conds[role])
        cam = None
        if CAMERA in conds:
            traj = torch.as_tensor(np.asarray(conds[CAMERA]), dtype=self.codec.weight.dtype)
            cam = traj[:: self.codec.temporal_factor]
        text_ids = self.text.ids(conds.get("text", "")) if use_text else None
        return PreparedSample(sample.kind, plan, x1, z_ref, static, cam, text_ids, h, w, sample.seed)

    # -- forward -------------------------------------------------------------------------------
    def condition_grids(self, prep: PreparedSample) -> dict:
        grids = dict(prep.static)
        if prep.camera is not None:
            grids[CAMERA] = self.camera(prep.camera, prep.height, prep.width)
        if prep.text_ids is not None:
            grids[TEXT] = self.text.grid(prep.text_ids)
        return grids

    def sequence(self, prep: PreparedSample, x_t: torch.Tensor, grids: Optional[dict] = None) -> TokenSequence:
        grids = self.condition_grids(prep) if grids is None else grids
        seq = assemble_sequence(x_t, prep.z_ref, grids, prep.plan)
        return add_condition_bias(seq, self.bias) if self.cfg.condition_bias else seq

    def velocity(self, preps: Sequence[PreparedSample], x_ts: Sequence[torch.Tensor], t: torch.Tensor,
                 grids: Optional[Sequence[dict]] = None) -> list[torch.Tensor]:
        grids = grids or [None] * len(preps)
        if not self.cfg.precondition:
            seqs = [self.sequence(p, x, g) for p, x, g in zip(preps, x_ts, grids)]
            batch = collate(seqs)
            return split_noisy(self.dit(batch, t), batch.noisy_shapes)
        c_in, c_skip, c_out = precondition_coeffs(t.to(x_ts[0].dtype))
        seqs = [self.sequence(p, c_in[i] * x, g) for i, (p, x, g) in enumerate(zip(preps, x_ts, grids))]
        batch = collate(seqs)
        out = split_noisy(self.dit(batch, t), batch.noisy_shapes)
        return [c_skip[i] * x + c_out[i] * o for i, (x, o) in enumerate(zip(x_ts, out))]
