"""Frame-axis positional index plans for concatenated edit sequences.

Every token segment of a task instance (noisy latent, reference video and
each condition) gets a list of frame indices used by the rotary embedding.
Frame-aligned segments reuse the noisy band ``[0, N)``, fixed-slot segments
live at ``N + offset``, soft references are pushed out by a constant shift and
absolute segments sit on a single pinned index.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Union

from .errors import LengthExceedsRegistry, UnknownRole


class TaskKind(str, enum.Enum):
    ID_INSERT = "id_insert"
    ID_SWAP = "id_swap"
    ID_DELETE = "id_delete"
    STYLIZATION = "stylization"
    PROPAGATION = "propagation"
    RECAMERA = "recamera"

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        key = name.strip().lower().replace("-", "_")
        aliases = {"idinsert": "id_insert", "idswap": "id_swap", "iddelete": "id_delete",
                   "style": "stylization", "camera": "recamera", "re_camera": "recamera"}
        key = aliases.get(key, key)
        return cls(key)


ID_TASKS = (TaskKind.ID_INSERT, TaskKind.ID_SWAP, TaskKind.ID_DELETE)
STRICT_TASKS = ID_TASKS + (TaskKind.STYLIZATION, TaskKind.PROPAGATION)


@dataclass(frozen=True)
class FrameAligned:
    pass


@dataclass(frozen=True)
class FixedSlot:
    offset: int
    length: int


@dataclass(frozen=True)
class SoftShift:
    delta: int


@dataclass(frozen=True)
class AbsoluteIndex:
    index: int


Alignment = Union[FrameAligned, FixedSlot, SoftShift, AbsoluteIndex]

# Roles with a fixed meaning in the concatenated sequence.
NOISY = "noisy"
REFERENCE = "reference"
SOFT_REFERENCE = "soft_reference"
CAMERA = "camera"
ID_IMAGES = "id_images"
STYLE_IMAGE = "style_image"
FIRST_FRAME = "first_frame"
TEXT = "text"

# Conditions each task brings on its own; the reference is added separately.
TASK_CONDITIONS: dict[TaskKind, tuple[str, ...]] = {
    TaskKind.ID_INSERT: (ID_IMAGES,),
    TaskKind.ID_SWAP: (ID_IMAGES,),
    TaskKind.ID_DELETE: (ID_IMAGES,),
    TaskKind.STYLIZATION: (STYLE_IMAGE,),
    TaskKind.PROPAGATION: (FIRST_FRAME,),
    TaskKind.RECAMERA: (CAMERA,),
}


@dataclass(frozen=True)
class SlotSpec:
    role: str
    alignment: Alignment


@dataclass
class SlotRegistry:
    """Ordered map of condition role to index rule.

    Entry order is also the order in which conditions are concatenated.
    """

    entries: dict[str, Alignment]
    max_latent_len: int = 64

    def __post_init__(self) -> None:
        if self.max_latent_len < 1:
            raise ValueError("max_latent_len must be positive")
        spans = []
        for role, rule in self.entries.items():
            if isinstance(rule, FixedSlot):
                if rule.offset <= 0 or rule.length <= 0:
                    raise ValueError(f"fixed slot {role!r} needs offset > 0 and length > 0")
                spans.append((role, rule.offset, rule.offset + rule.length))
            elif isinstance(rule, SoftShift):
                if rule.delta <= self.max_latent_len:
                    raise ValueError(
                        f"soft shift {role!r}: delta {rule.delta} must exceed max_latent_len {self.max_latent_len}")
            elif isinstance(rule, AbsoluteIndex):
                if not 0 <= rule.index < self.max_latent_len:
                    raise ValueError(f"absolute index {role!r} outside [0, {self.max_latent_len})")
            elif not isinstance(rule, FrameAligned):
                raise TypeError(f"unknown alignment for {role!r}: {rule!r}")
        for (ra, a0, a1), (rb, b0, b1) in itertools.combinations(spans, 2):
            if a0 < b1 and b0 < a1:
                raise ValueError(f"fixed slots {ra!r} and {rb!r} overlap")

    def __contains__(self, role: str) -> bool:
        return role in self.entries

    def spec(self, role: str) -> SlotSpec:
        try:
            return SlotSpec(role, self.entries[role])
        except KeyError:
            raise UnknownRole(role) from None

    @property
    def roles(self) -> list[str]:
        return list(self.entries)

    def to_dict(self) -> dict:
        """Entries as an ordered list so concatenation order survives key-sorting serializers."""
        entries = []
        for role, rule in self.entries.items():
            if isinstance(rule, FrameAligned):
                entries.append({"role": role, "kind": "frame_aligned"})
            elif isinstance(rule, FixedSlot):
                entries.append({"role": role, "kind": "fixed_slot", "offset": rule.offset, "length": rule.length})
            elif isinstance(rule, SoftShift):
                entries.append({"role": role, "kind": "soft_shift", "delta": rule.delta})
            else:
                entries.append({"role": role, "kind": "absolute", "index": rule.index})
        return {"max_latent_len": self.max_latent_len, "entries": entries}

    @classmethod
    def from_dict(cls, data: dict) -> "SlotRegistry":
        raw = data["entries"]
        items = [(e["role"], e) for e in raw] if isinstance(raw, list) else list(raw.items())
        entries: dict[str, Alignment] = {}
        for role, rule in items:
            kind = rule["kind"]
            extra = set(rule) - {"role", "kind", "offset", "length", "delta", "index"}
            if extra:
                raise ValueError(f"unknown key(s) {sorted(extra)} for role {role!r}")
            if role in entries:
                raise ValueError(f"duplicate role {role!r}")
            if kind == "frame_aligned":
                entries[role] = FrameAligned()
            elif kind == "fixed_slot":
                entries[role] = FixedSlot(int(rule["offset"]), int(rule["length"]))
            elif kind == "soft_shift":
                entries[role] = SoftShift(int(rule["delta"]))
            elif kind == "absolute":
                entries[role] = AbsoluteIndex(int(rule["index"]))
            else:
                raise ValueError(f"unknown slot kind {kind!r} for role {role!r}")
        return cls(entries, int(data["max_latent_len"]))

    def fingerprint(self) -> str:
        text = repr([(r, repr(a)) for r, a in self.entries.items()]) + f"|{self.max_latent_len}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def default_registry(max_latent_len: int = 64, text_slots: int = 1) -> SlotRegistry:
    return SlotRegistry(
        {
            REFERENCE: FrameAligned(),
            SOFT_REFERENCE: SoftShift(300),
            CAMERA: FrameAligned(),
            ID_IMAGES: FixedSlot(100, 3),
            STYLE_IMAGE: FixedSlot(200, 1),
            FIRST_FRAME: AbsoluteIndex(1),
            TEXT: FixedSlot(400, text_slots),
        },
        max_latent_len,
    )


@dataclass(frozen=True)
class Segment:
    role: str
    indices: tuple[int, ...]
    grid: tuple[int, int]
    is_noisy: bool = False
    rule: str = "frame_aligned"  # frame_aligned | fixed_slot | soft_shift | absolute | sequential

    @property
    def frames(self) -> int:
        return len(self.indices)

    @property
    def token_count(self) -> int:
        return len(self.indices) * self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class LayoutPlan:
    base_offset: int
    segments: tuple[Segment, ...]

    @property
    def token_count(self) -> int:
        return sum(s.token_count for s in self.segments)

    @property
    def roles(self) -> list[str]:
        return [s.role for s in self.segments]

    def segment(self, role: str) -> Segment:
        for s in self.segments:
            if s.role == role:
                return s
        raise KeyError(role)

    def table(self) -> str:
        """Line-oriented rendering: role, index list, token count."""
        lines = [f"# base_offset={self.base_offset} tokens={self.token_count}"]
        for s in self.segments:
            idx = ",".join(str(i) for i in s.indices)
            lines.append(f"{s.role}\t{idx}\t{s.token_count}")
        return "\n".join(lines)


@dataclass
class OverlapReport:
    collisions: list[tuple[str, str, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.collisions

    def __bool__(self) -> bool:
        return self.ok

    def indices(self) -> set[int]:
        return {i for _, _, i in self.collisions}


def _segment_grid(role: str, grid: tuple[int, int], text_len: int) -> tuple[int, int]:
    return (1, text_len) if role == TEXT else grid


def resolve_roles(task: TaskKind, conditions: Iterable[str], registry: SlotRegistry) -> list[str]:
    """Reference role plus the task's own conditions and any extra ones, in registry order."""
    wanted = set(TASK_CONDITIONS[task]) | set(conditions)
    if SOFT_REFERENCE not in wanted and REFERENCE not in wanted:
        # re-rendering with a camera only loosely follows the source
        wanted.add(SOFT_REFERENCE if CAMERA in wanted else REFERENCE)
    if SOFT_REFERENCE in wanted:
        wanted.discard(REFERENCE)
    for role in wanted:
        if role not in registry:
            raise UnknownRole(role)
    return [r for r in registry.roles if r in wanted]


def plan_for_roles(roles: Iterable[str], latent_len: int, registry: SlotRegistry,
                   grid: tuple[int, int] = (4, 4), text_len: int = 8) -> LayoutPlan:
    if latent_len < 1:
        raise ValueError("latent_len must be positive")
    if latent_len > registry.max_latent_len:
        raise LengthExceedsRegistry(latent_len, registry.max_latent_len)
    n = latent_len
    segments = [Segment(NOISY, tuple(range(n)), grid, is_noisy=True)]
    for role in roles:
        rule = registry.spec(role).alignment
        g = _segment_grid(role, grid, text_len)
        if isinstance(rule, FrameAligned):
            segments.append(Segment(role, tuple(range(n)), g, rule="frame_aligned"))
        elif isinstance(rule, FixedSlot):
            start = n + rule.offset
            segments.append(Segment(role, tuple(range(start, start + rule.length)), g, rule="fixed_slot"))
        elif isinstance(rule, SoftShift):
            segments.append(Segment(role, tuple(range(rule.delta, rule.delta + n)), g, rule="soft_shift"))
        else:
            segments.append(Segment(role, (rule.index,), g, rule="absolute"))
    return LayoutPlan(n, tuple(segments))


def plan_indices(task: TaskKind, conditions: Iterable[str], latent_len: int, registry: SlotRegistry,
                 grid: tuple[int, int] = (4, 4), text_len: int = 8) -> LayoutPlan:
    """Task-aware plan: the noisy segment first, then the reference, then conditions."""
    roles = resolve_roles(TaskKind(task), conditions, registry)
    return plan_for_roles(roles, latent_len, registry, grid, text_len)


def plan_sequential(task: TaskKind, conditions: Iterable[str], latent_len: int, registry: SlotRegistry,
                    grid: tuple[int, int] = (4, 4), text_len: int = 8) -> LayoutPlan:
    """Baseline plan stacking every segment on consecutive frame indices."""
    aware = plan_indices(task, conditions, latent_len, registry, grid, text_len)
    cursor = 0
    segments = []
    for s in aware.segments:
        idx = tuple(range(cursor, cursor + s.frames))
        cursor += s.frames
        segments.append(Segment(s.role, idx, s.grid, s.is_noisy, "frame_aligned" if s.is_noisy else "sequential"))
    return LayoutPlan(aware.base_offset, tuple(segments))


def validate_plan(plan: LayoutPlan) -> OverlapReport:
    """Report collisions between exclusively-owned indices.

    Fixed-slot segments own their indices and must stay clear of each other, of
    absolute and soft-shifted segments, and of the band ``[0, 2m)``: the noisy
    frames plus a guard band of the same width, so a slot never sits closer to a
    noisy frame than two noisy frames can sit to each other. Absolute segments
    deliberately point at a noisy frame and are only checked against other
    owned indices. Frame-aligned and soft-shifted aliasing is intended.
    """
    m = plan.base_offset
    report = OverlapReport()
    owned = [s for s in plan.segments if s.rule in ("fixed_slot", "absolute")]
    for a, b in itertools.combinations(owned, 2):
        for i in sorted(set(a.indices) & set(b.indices)):
            report.collisions.append((a.role, b.role, i))
    softs = [s for s in plan.segments if s.rule == "soft_shift"]
    for a in owned:
        for b in softs:
            for i in sorted(set(a.indices) & set(b.indices)):
                report.collisions.append((a.role, b.role, i))
        if a.rule == "fixed_slot":
            for i in a.indices:
                if 0 <= i < m:
                    report.collisions.append((a.role, NOISY, i))
                elif m <= i < 2 * m:
                    report.collisions.append((a.role, "guard", i))
    return report


def _role_subsets(roles: list[str]) -> Iterable[tuple[str, ...]]:
    for r in range(len(roles) + 1):
        yield from itertools.combinations(roles, r)


def max_safe_length(registry: SlotRegistry, grid: tuple[int, int] = (1, 1)) -> int:
    """Largest N such that every plan with latent length up to N validates.

    Found by exhaustive search over every subset of registry roles.
    """
    roles = registry.roles
    best = 0
    for n in range(1, registry.max_latent_len + 1):
        for subset in _role_subsets(roles):
            if not validate_plan(plan_for_roles(subset, n, registry, grid)).ok:
                return best
        best = n
    return best
