"""Diffusion transformer over one concatenated ``[noisy; reference; conditions]`` sequence."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import MissingBias, MissingSegment, NonFiniteActivation, ShapeMismatch
from .layout import NOISY, LayoutPlan


@dataclass
class DiTConfig:
    depth: int = 4
    channels: int = 64
    heads: int = 4
    head_dim: int = 16
    grid: tuple[int, int] = (4, 4)
    rope_base: float = 10000.0
    mlp_ratio: int = 4
    text_len: int = 8
    text_buckets: int = 64
    rope_mode: str = "task_aware"  # or "sequential" (ablation baseline)
    condition_bias: bool = True
    latent_scale: float = 5.0  # codec gain; puts latents near unit variance like the noise
    time_modulation: bool = True  # per-block shift/scale/gate from t on noisy tokens only
    precondition: bool = True  # unit-variance input scaling and a skip path for the velocity

    def __post_init__(self) -> None:
        self.grid = tuple(self.grid)
        if self.rope_mode not in ("task_aware", "sequential"):
            raise ValueError(f"unknown rope_mode {self.rope_mode!r}")
        if self.channels != self.heads * self.head_dim:
            raise ValueError(f"channels {self.channels} != heads {self.heads} x head_dim {self.head_dim}")
        if self.head_dim % 8:
            raise ValueError("head_dim must split 2:1:1 into even frame/row/col blocks (multiple of 8)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


# --- rotary embedding ---------------------------------------------------------------------------

def rope_split(head_dim: int) -> tuple[int, int, int]:
    """Frame/row/col sub-block sizes in ratio 2:1:1."""
    return head_dim // 2, head_dim // 4, head_dim // 4


def rope_angles(positions: torch.Tensor, head_dim: int, base: float = 10000.0) -> torch.Tensor:
    """``(..., 3)`` integer positions -> ``(..., head_dim // 2)`` rotation angles (float64)."""
    pos = positions.to(torch.float64)
    parts = []
    for axis, d in enumerate(rope_split(head_dim)):
        freqs = base ** (-torch.arange(0, d, 2, dtype=torch.float64) / d)
        parts.append(pos[..., axis, None] * freqs)
    return torch.cat(parts, dim=-1)


def rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent channel pairs ``(2i, 2i+1)`` of ``x`` by the given angles."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def apply_rope(q: torch.Tensor, k: torch.Tensor, position, cfg: DiTConfig) -> tuple[torch.Tensor, torch.Tensor]:
    pos = torch.as_tensor(position)
    ang = rope_angles(pos, q.shape[-1], cfg.rope_base)
    cos, sin = ang.cos().to(q.dtype), ang.sin().to(q.dtype)
    return rotate(q, cos, sin), rotate(k, cos, sin)


# --- token sequences ----------------------------------------------------------------------------

@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (L, C)
    positions: torch.Tensor  # (L, 3) frame index from the plan, grid row, grid col
    roles: list[str]  # per segment
    role_of_token: torch.Tensor  # (L,) index into ``roles``
    groups: torch.Tensor  # (L,) one id per (segment, frame) for spatial attention
    segments: list[tuple[str, int, int]]  # (role, start, end) token offsets
    noisy_shape: tuple[int, int, int, int]  # (N, C, h, w)

    @property
    def noisy_len(self) -> int:
        n, _, h, w = self.noisy_shape
        return n * h * w

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def permuted(self, order: Sequence[int]) -> "TokenSequence":
        """Same tokens with condition segments reordered in memory (positions travel along)."""
        segs = [self.segments[0]] + [self.segments[1:][i] for i in order]
        idx = torch.cat([torch.arange(s, e) for _, s, e in segs])
        new_segments, cursor = [], 0
        for role, s, e in segs:
            new_segments.append((role, cursor, cursor + e - s))
            cursor += e - s
        return TokenSequence(self.tokens[idx], self.positions[idx], self.roles, self.role_of_token[idx],
                             self.groups[idx], new_segments, self.noisy_shape)


def _grid_tokens(grid: torch.Tensor) -> torch.Tensor:
    return grid.permute(0, 2, 3, 1).reshape(-1, grid.shape[1])


def assemble_sequence(z_tar: torch.Tensor, z_ref: Optional[torch.Tensor], conds: Mapping[str, torch.Tensor],
                      plan: LayoutPlan) -> TokenSequence:
    """Concatenate segments along the frame axis in plan order, copying positions from the plan.

    ``z_ref`` fills whichever reference role the plan carries; it may be None for plans without one.
    """
    pieces, positions, role_ids, groups, segments, roles = [], [], [], [], [], []
    cursor = 0
    group = 0
    for seg in plan.segments:
        if seg.is_noisy:
            grid = z_tar
        elif seg.role in ("reference", "soft_reference") and seg.role not in conds:
            grid = z_ref
        else:
            grid = conds.get(seg.role)
        if grid is None:
            raise MissingSegment(f"no token grid for segment {seg.role!r}")
        want = (seg.frames, seg.grid[0], seg.grid[1])
        if grid.ndim != 4 or (grid.shape[0], grid.shape[2], grid.shape[3]) != want:
            raise ShapeMismatch(f"segment {seg.role!r}: expected (frames, h, w) {want}, got {tuple(grid.shape)}")
        if grid.shape[1] != z_tar.shape[1]:
            raise ShapeMismatch(f"segment {seg.role!r}: channel count {grid.shape[1]} != {z_tar.shape[1]}")
        f, _, h, w = grid.shape
        frame = torch.as_tensor(seg.indices, dtype=torch.long)[:, None, None].expand(f, h, w)
        row = torch.arange(h)[None, :, None].expand(f, h, w)
        col = torch.arange(w)[None, None, :].expand(f, h, w)
        pieces.append(_grid_tokens(grid))
        positions.append(torch.stack([frame, row, col], dim=-1).reshape(-1, 3))
        role_ids.append(torch.full((f * h * w,), len(roles), dtype=torch.long))
        groups.append((group + torch.arange(f))[:, None].expand(f, h * w).reshape(-1))
        group += f
        roles.append(seg.role)
        segments.append((seg.role, cursor, cursor + f * h * w))
        cursor += f * h * w
    return TokenSequence(torch.cat(pieces), torch.cat(positions), roles, torch.cat(role_ids),
                         torch.cat(groups), segments, tuple(z_tar.shape))


class ConditionBiasTable(nn.Module):
    """One learnable vector per condition role, zero at initialization."""

    def __init__(self, roles: Sequence[str], channels: int):
        super().__init__()
        self.roles = [r for r in roles if r != NOISY]
        self.index = {r: i for i, r in enumerate(self.roles)}
        self.weight = nn.Parameter(torch.zeros(len(self.roles), channels))

    def vector(self, role: str) -> torch.Tensor:
        try:
            return self.weight[self.index[role]]
        except KeyError:
            raise MissingBias(f"no condition bias for role {role!r}") from None


def add_condition_bias(seq: TokenSequence, table: ConditionBiasTable) -> TokenSequence:
    """Add each segment's role bias to its tokens; noisy tokens are left untouched."""
    per_role = []
    for role in seq.roles:
        if role == NOISY:
            per_role.append(torch.zeros(seq.tokens.shape[1], dtype=seq.tokens.dtype))
        else:
            per_role.append(table.vector(role).to(seq.tokens.dtype))
    bias = torch.stack(per_role)[seq.role_of_token]
    noisy = torch.tensor([r == NOISY for r in seq.roles])[seq.role_of_token]
    tokens = torch.where(noisy[:, None], seq.tokens, seq.tokens + bias)
    return TokenSequence(tokens, seq.positions, seq.roles, seq.role_of_token, seq.groups, seq.segments,
                         seq.noisy_shape)


# --- batching -----------------------------------------------------------------------------------

@dataclass
class Batch:
    tokens: torch.Tensor  # (B, L, C)
    positions: torch.Tensor  # (B, L, 3)
    groups: torch.Tensor  # (B, L)
    valid: torch.Tensor  # (B, L) bool
    noisy: torch.Tensor  # (B, L) bool
    noisy_shapes: list[tuple[int, int, int, int]] = field(default_factory=list)
    # when every spatial group is a contiguous run of ``block`` tokens, spatial attention
    # runs on reshaped blocks instead of a full masked L x L product
    block: Optional[int] = None

    @property
    def noisy_max(self) -> int:
        return max(n * h * w for n, _, h, w in self.noisy_shapes)


def collate(seqs: Sequence[TokenSequence]) -> Batch:
    b = len(seqs)
    length = max(len(s) for s in seqs)
    c = seqs[0].tokens.shape[1]
    dtype = seqs[0].tokens.dtype
    tokens = seqs[0].tokens.new_zeros((b, length, c))
    positions = torch.zeros((b, length, 3), dtype=torch.long)
    # padding tokens get private groups so their spatial-attention rows are never empty
    groups = (1 << 30) + torch.arange(length).repeat(b, 1)
    valid = torch.zeros((b, length), dtype=torch.bool)
    noisy = torch.zeros((b, length), dtype=torch.bool)
    rows = []
    for i, s in enumerate(seqs):
        n = len(s)
        rows.append(torch.cat([s.tokens, s.tokens.new_zeros((length - n, c))]) if n < length else s.tokens)
        positions[i, :n] = s.positions
        groups[i, :n] = s.groups
        valid[i, :n] = True
        noisy[i, : s.noisy_len] = True
    tokens = torch.stack(rows).to(dtype)
    _, _, h, w = seqs[0].noisy_shape
    k = h * w
    block = None
    if length % k == 0:
        expected = torch.arange(length) // k
        if all(torch.equal(s.groups, expected[: len(s)]) for s in seqs):
            block = k
    return Batch(tokens, positions, groups, valid, noisy, [s.noisy_shape for s in seqs], block)


# --- model --------------------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64)[:, None] * 1000.0) * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(t.dtype)


class Attention(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.qkv = nn.Linear(cfg.channels, 3 * cfg.channels)
        self.proj = nn.Linear(cfg.channels, cfg.channels)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor, mask: Optional[torch.Tensor],
                block: Optional[int] = None) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        q, k = rotate(q, cos, sin), rotate(k, cos, sin)
        if block is None:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        else:
            q, k, v = (y.reshape(b, self.heads, n // block, block, self.head_dim) for y in (q, k, v))
            out = F.scaled_dot_product_attention(q, k, v).reshape(b, self.heads, n, self.head_dim)
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class DiTBlock(nn.Module):
    """Spatial attention within each (segment, frame), then full attention over the sequence."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        c = cfg.channels
        self.norm1 = nn.LayerNorm(c)
        self.attn2d = Attention(cfg)
        self.norm2 = nn.LayerNorm(c)
        self.attn3d = Attention(cfg)
        self.norm3 = nn.LayerNorm(c)
        self.mlp = nn.Sequential(nn.Linear(c, cfg.mlp_ratio * c), nn.GELU(), nn.Linear(cfg.mlp_ratio * c, c))
        self.modulation = None
        if cfg.time_modulation:
            # zero init: every shift, scale and gate starts as the identity
            self.modulation = nn.Linear(c, 9 * c)
            nn.init.zeros_(self.modulation.weight)
            nn.init.zeros_(self.modulation.bias)

    def forward(self, x, rope2d, rope3d, mask2d, mask3d, block=None, temb=None, noisy=None):
        if self.modulation is None or temb is None:
            x = x + self.attn2d(self.norm1(x), *rope2d, mask2d, block)
            x = x + self.attn3d(self.norm2(x), *rope3d, mask3d)
            return x + self.mlp(self.norm3(x))
        # (B, 1, 9C) masked to noisy rows so condition tokens see no time signal
        mod = (self.modulation(temb)[:, None, :] * noisy[..., None]).chunk(9, dim=-1)
        x = x + (1 + mod[2]) * self.attn2d(self.norm1(x) * (1 + mod[1]) + mod[0], *rope2d, mask2d, block)
        x = x + (1 + mod[5]) * self.attn3d(self.norm2(x) * (1 + mod[4]) + mod[3], *rope3d, mask3d)
        return x + (1 + mod[8]) * self.mlp(self.norm3(x) * (1 + mod[7]) + mod[6])


class DiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.in_proj = nn.Linear(c, c)
        self.time_mlp = nn.Sequential(nn.Linear(c, c), nn.SiLU(), nn.Linear(c, c))
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(c)
        self.head = nn.Linear(c, c)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _rope(self, positions: torch.Tensor, dtype: torch.dtype, spatial_only: bool):
        pos = positions.clone()
        if spatial_only:
            pos[..., 0] = 0
        ang = rope_angles(pos, self.cfg.head_dim, self.cfg.rope_base)[:, None]  # (B, 1, L, hd/2)
        return ang.cos().to(dtype), ang.sin().to(dtype)

    def forward(self, batch: Batch, t: torch.Tensor, check_finite: bool = True) -> torch.Tensor:
        """Velocity for the noisy tokens, ``(B, noisy_max, C)``; rows past each sample's noisy length are junk."""
        x = self.in_proj(batch.tokens)
        temb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.cfg.channels))
        noisy = batch.noisy.to(x.dtype)
        x = x + noisy[..., None] * temb[:, None, :]
        temb = nn.functional.silu(temb)
        rope2d = self._rope(batch.positions, x.dtype, spatial_only=True)
        rope3d = self._rope(batch.positions, x.dtype, spatial_only=False)
        mask2d = None if batch.block else (batch.groups[:, :, None] == batch.groups[:, None, :])[:, None]
        mask3d = batch.valid[:, None, None, :]
        for i, block in enumerate(self.blocks):
            x = block(x, rope2d, rope3d, mask2d, mask3d, batch.block, temb, noisy)
            if check_finite and not torch.isfinite(x).all():
                raise NonFiniteActivation(i)
        out = self.head(self.norm_out(x[:, : batch.noisy_max]))
        if check_finite and not torch.isfinite(out).all():
            raise NonFiniteActivation(len(self.blocks), "output head")
        return out


def split_noisy(out: torch.Tensor, shapes: Sequence[tuple[int, int, int, int]]) -> list[torch.Tensor]:
    """Per-sample ``(N, C, h, w)`` velocity grids from the padded forward output."""
    grids = []
    for i, (n, c, h, w) in enumerate(shapes):
        grids.append(out[i, : n * h * w].reshape(n, h, w, c).permute(0, 3, 1, 2))
    return grids


def tokens_of(grid: torch.Tensor) -> torch.Tensor:
    return _grid_tokens(grid)
