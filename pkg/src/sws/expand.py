"""Expanding a learngene pack into descendants of arbitrary depth.

The cyclic-contiguous strategy keeps stages contiguous: the target depth is
split across stages in proportion to the source plan, and each position gets
a fresh copy of its stage's layer set. At the source depth this reproduces
the auxiliary network exactly. Two other strategies exist for comparisons,
a round-robin interleaving and a seeded random pick per position.

Descendants are always fully untied: every position owns its copies, so
fine-tuning can specialize positions independently.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

from .rng import SplitMix64
from .sharing import LearngenePack, PlanError, StagePlan, custom_plan
from .tensor import Tensor
from .vit import ModelParams, reinit_head

GROUPS = ("front", "mid", "last")
STRATEGIES = ("cyclic-contiguous", "cyclic-roundrobin", "random")


class ExpandError(ValueError):
    pass


@dataclass(frozen=True)
class InitOrder:
    """Priority of the depth groups when spare layers are handed out.

    Stages are grouped by position: the first ceil(M/3) stages are "front",
    the last ceil(M/3) are "last", the rest are "mid". Spare layers go one
    per stage, groups taken in priority order, ascending index inside each.
    """

    priority: tuple[str, str, str] = ("front", "mid", "last")

    def __post_init__(self):
        if sorted(self.priority) != sorted(GROUPS):
            raise ExpandError(f"order must be a permutation of {GROUPS}, got {self.priority}")

    @classmethod
    def parse(cls, text: str) -> "InitOrder":
        parts = tuple(text.strip().lower().split("-"))
        return cls(parts)  # type: ignore[arg-type]

    def __str__(self) -> str:
        return "-".join(self.priority)

    def fill_sequence(self, num_stages: int) -> list[int]:
        """Stage indices in the order they receive spare layers."""
        edge = math.ceil(num_stages / 3)
        members = {
            "front": list(range(min(edge, num_stages))),
            "last": list(range(max(0, num_stages - edge), num_stages)),
        }
        taken = set(members["front"]) | set(members["last"])
        members["mid"] = [i for i in range(num_stages) if i not in taken]
        seq: list[int] = []
        seen: set[int] = set()
        for group in self.priority:
            for i in members[group]:
                if i not in seen:
                    seen.add(i)
                    seq.append(i)
        return seq


DEFAULT_ORDER = InitOrder()


@dataclass(frozen=True)
class DescendantSpec:
    depth: int
    strategy: str = "cyclic-contiguous"
    order: InitOrder = DEFAULT_ORDER
    seed: int = 0
    classes: int | None = None  # None keeps the pack's class count

    def __post_init__(self):
        if self.depth < 1:
            raise ExpandError(f"descendant depth must be >= 1, got {self.depth}")
        if self.strategy not in STRATEGIES:
            raise ExpandError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")


def stage_partition(target_depth: int, plan: StagePlan, order: InitOrder = DEFAULT_ORDER) -> tuple[int, ...]:
    """Per-stage layer counts for a contiguous expansion to target_depth.

    Each stage starts from floor(target * its share of the source depth),
    raised to at least 1, and the remaining layers are handed out one per
    stage along the order's fill sequence. Very lopsided plans can overshoot
    the target through the at-least-1 floor; the excess is then taken back
    one layer at a time walking the fill sequence backwards, never dropping
    a stage below 1.
    """
    m = plan.num_stages
    if target_depth < m:
        raise ExpandError(f"contiguous expansion needs depth >= {m} stages, got {target_depth}")
    total = plan.total_layers
    counts = [max(1, (target_depth * s) // total) for s in plan.stage_sizes]
    seq = order.fill_sequence(m)
    leftover = target_depth - sum(counts)
    if leftover > 0:
        if leftover >= m:
            raise ExpandError(f"internal: leftover {leftover} should be < {m} stages")
        for i in seq[:leftover]:
            counts[i] += 1
    while leftover < 0:
        for i in reversed(seq):
            if counts[i] > 1 and leftover < 0:
                counts[i] -= 1
                leftover += 1
    return tuple(counts)


# ---- per-position assignments ----------------------------------------------------


def contiguous_assignment(target_depth: int, plan: StagePlan, order: InitOrder = DEFAULT_ORDER) -> list[int]:
    counts = stage_partition(target_depth, plan, order)
    out: list[int] = []
    for m, c in enumerate(counts):
        out.extend([m] * c)
    return out


def roundrobin_assignment(target_depth: int, num_stages: int) -> list[int]:
    return [i % num_stages for i in range(target_depth)]


def random_assignment(target_depth: int, num_stages: int, seed: int) -> list[int]:
    rng = SplitMix64(seed)
    return [rng.randbelow(num_stages) for _ in range(target_depth)]


def assignment_for(plan: StagePlan, spec: DescendantSpec) -> list[int]:
    """0-based stage index per descendant position, chosen by ``spec.strategy``."""
    if spec.strategy == "cyclic-contiguous":
        return contiguous_assignment(spec.depth, plan, spec.order)
    if spec.strategy == "cyclic-roundrobin":
        return roundrobin_assignment(spec.depth, plan.num_stages)
    return random_assignment(spec.depth, plan.num_stages, spec.seed)


def assignment_report(assignment: list[int]) -> list[tuple[int, int]]:
    """(position, source set) pairs, both 1-based, for logs and CSV output."""
    return [(i + 1, m + 1) for i, m in enumerate(assignment)]


def write_assignment_csv(report: list[tuple[int, int]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "learngene_index"])
        w.writerows(report)


# ---- descendant construction -------------------------------------------------------


def init_descendant(pack: LearngenePack, spec: DescendantSpec) -> tuple[ModelParams, list[tuple[int, int]]]:
    """Build an untied model of spec.depth from the pack.

    Shared components (patch embedding, class token, positional embedding,
    final norm) are copied as-is. The head is copied when the class counts
    match and reinitialized from spec.seed otherwise. Every layer position
    receives its own deep copy of the assigned stage set.
    """
    assignment = assignment_for(pack.plan, spec)
    cfg = replace(pack.cfg, depth=spec.depth)

    def cp(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=True)

    params = ModelParams(
        cfg=cfg,
        patch_w=cp(pack.patch_w), patch_b=cp(pack.patch_b),
        cls_token=cp(pack.cls_token), pos_embed=cp(pack.pos_embed),
        layers=[pack.layer_sets[m].clone() for m in assignment],
        final_ln_g=cp(pack.final_ln_g), final_ln_b=cp(pack.final_ln_b),
        head_w=cp(pack.head_w), head_b=cp(pack.head_b),
        plan=None,
    )
    classes = spec.classes if spec.classes is not None else pack.cfg.classes
    if classes != pack.cfg.classes:
        reinit_head(params, classes, spec.seed)
    return params, assignment_report(assignment)


def pack_from_vanilla(model: ModelParams) -> LearngenePack:
    """Treat each layer of an ordinary untied model as a one-layer stage.

    This is the baseline expansion: no sharing was ever trained, the layers
    just get stretched across the target depth the same way a real pack is.
    """
    if model.plan is not None:
        raise ExpandError("expected an untied model, this one carries a tying plan")

    def cp(name: str) -> Tensor:
        t = getattr(model, name)
        return Tensor(t.data.copy(), requires_grad=True)

    return LearngenePack(
        cfg=model.cfg,
        plan=custom_plan([1] * len(model.layers)),
        layer_sets=[lp.clone() for lp in model.layers],
        patch_w=cp("patch_w"), patch_b=cp("patch_b"),
        cls_token=cp("cls_token"), pos_embed=cp("pos_embed"),
        final_ln_g=cp("final_ln_g"), final_ln_b=cp("final_ln_b"),
        head_w=cp("head_w"), head_b=cp("head_b"),
        provenance={"source": "vanilla"},
    )


def simple_lg_expand(model: ModelParams, spec: DescendantSpec) -> tuple[ModelParams, list[tuple[int, int]]]:
    """Expand a plain model's layers to spec.depth as pseudo learngenes."""
    return init_descendant(pack_from_vanilla(model), spec)
