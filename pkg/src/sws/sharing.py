"""Stage plans, tied auxiliary models, and learngene extraction.

A stage plan splits the depth axis of a transformer into contiguous stages.
The auxiliary model allocates one layer parameter set per stage and reuses
that set (the same Tensor objects) at every position inside the stage, so a
stage of size s applies its block s times in sequence. Gradient accumulation
in the tensor core then sums the per-position contributions into the shared
storage with no extra bookkeeping here.

Extraction deep-copies the per-stage sets plus the shared components into a
LearngenePack, the unit that gets persisted and later expanded into
descendants of other depths.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor
from .vit import LayerParams, ModelConfig, ModelParams, build_params

PACK_VERSION = 1


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class StagePlan:
    """Sizes of the contiguous stages, front to back."""

    stage_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.stage_sizes) == 0:
            raise PlanError("a plan needs at least one stage")
        for s in self.stage_sizes:
            if not isinstance(s, int) or s < 1:
                raise PlanError(f"stage sizes must be positive integers, got {self.stage_sizes}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_sizes)

    @property
    def total_layers(self) -> int:
        return sum(self.stage_sizes)

    def stage_of_position(self) -> list[int]:
        """Stage index for each depth position, front to back."""
        out = []
        for m, s in enumerate(self.stage_sizes):
            out.extend([m] * s)
        return out


def center_out_order(m: int) -> list[int]:
    """Stage indices sorted middle first, alternating outward, front wins ties."""
    c = (m - 1) / 2.0
    return sorted(range(m), key=lambda i: (abs(i - c), i))


def balanced_plan(total_layers: int, num_stages: int) -> StagePlan:
    """Split total_layers into num_stages nearly equal stages.

    Every stage gets floor(L/M); the L mod M leftover layers go to stages in
    center-out order, so the extra capacity sits in the middle of the network.
    """
    if num_stages < 1 or total_layers < num_stages:
        raise PlanError(f"cannot split {total_layers} layers into {num_stages} stages of size >= 1")
    base, extra = divmod(total_layers, num_stages)
    sizes = [base] * num_stages
    for i in center_out_order(num_stages)[:extra]:
        sizes[i] += 1
    return StagePlan(tuple(sizes))


def custom_plan(sizes) -> StagePlan:
    return StagePlan(tuple(int(s) for s in sizes))


# ---- tied model ---------------------------------------------------------------


def build_aux(cfg: ModelConfig, plan: StagePlan, seed: int, dtype=np.float32) -> ModelParams:
    """Model whose layer list repeats one parameter set per stage."""
    if plan.total_layers != cfg.depth:
        raise PlanError(f"plan covers {plan.total_layers} layers but cfg.depth is {cfg.depth}")
    return build_params(cfg, seed, plan.stage_of_position(), plan=plan, dtype=dtype)


def check_tying(params: ModelParams) -> None:
    """Verify the aliasing pattern matches the attached plan exactly."""
    plan = params.plan
    if plan is None:
        raise PlanError("model has no attached plan")
    stage_of = plan.stage_of_position()
    if len(stage_of) != len(params.layers):
        raise PlanError(f"plan covers {len(stage_of)} positions, model has {len(params.layers)}")
    reps: dict[int, LayerParams] = {}
    for pos, m in enumerate(stage_of):
        rep = reps.setdefault(m, params.layers[pos])
        if params.layers[pos] is not rep:
            raise PlanError(f"position {pos} does not alias the stage {m} parameter set")
    ids = {id(lp) for lp in reps.values()}
    if len(ids) != plan.num_stages:
        raise PlanError("distinct stages share a parameter set")


def stage_sets(params: ModelParams) -> list[LayerParams]:
    """The distinct per-stage parameter sets of a tied model, in stage order."""
    check_tying(params)
    stage_of = params.plan.stage_of_position()
    out: list[LayerParams] = []
    seen: set[int] = set()
    for pos, m in enumerate(stage_of):
        if m not in seen:
            seen.add(m)
            out.append(params.layers[pos])
    return out


def materialize_untied(params: ModelParams) -> ModelParams:
    """Deep-copied clone with every position holding its own parameter set."""
    clone = copy.copy(params)
    clone.layers = [lp.clone() for lp in params.layers]
    for name in ModelParams.SHARED_FIELDS:
        t = getattr(params, name)
        setattr(clone, name, Tensor(t.data.copy(), requires_grad=t.requires_grad))
    clone.plan = None
    return clone


# ---- extraction ----------------------------------------------------------------


@dataclass
class LearngenePack:
    """Per-stage layer sets plus the shared components, all owned copies."""

    cfg: ModelConfig
    plan: StagePlan
    layer_sets: list[LayerParams]
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    final_ln_g: Tensor
    final_ln_b: Tensor
    head_w: Tensor
    head_b: Tensor
    provenance: dict = field(default_factory=dict)
    version: int = PACK_VERSION

    @property
    def num_stages(self) -> int:
        return self.plan.num_stages


def extract_learngene(aux: ModelParams, provenance: dict | None = None) -> LearngenePack:
    """Pull the stage parameter sets out of a tied model as independent copies."""
    sets = stage_sets(aux)  # validates tying against the plan

    def cp(name: str) -> Tensor:
        t = getattr(aux, name)
        return Tensor(t.data.copy(), requires_grad=True)

    return LearngenePack(
        cfg=aux.cfg,
        plan=aux.plan,
        layer_sets=[lp.clone() for lp in sets],
        patch_w=cp("patch_w"), patch_b=cp("patch_b"),
        cls_token=cp("cls_token"), pos_embed=cp("pos_embed"),
        final_ln_g=cp("final_ln_g"), final_ln_b=cp("final_ln_b"),
        head_w=cp("head_w"), head_b=cp("head_b"),
        provenance=dict(provenance or {}),
    )
