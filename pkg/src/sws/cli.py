"""Command-line harness: train, expand, fine-tune, evaluate, sweep.

Every run takes a JSON config plus optional flag overrides, writes its
artifacts under --out, and drops a manifest.txt recording the resolved
config, seeds, and an FNV-1a hash of each artifact. Identical config and
seed replay to identical artifacts (checkpoints bitwise, CSVs bytewise);
the manifest's wallclock lines are the one place times appear.

Exit codes: 0 success, 2 config or validation problem, 3 file I/O problem,
4 malformed or mismatched artifact, 5 numeric divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from .data import DataError, Dataset, IdxFormatError, fnv1a64, load_idx, make_synthetic, split
from .expand import (DescendantSpec, ExpandError, InitOrder, init_descendant, simple_lg_expand,
                     write_assignment_csv)
from .sharing import PlanError, balanced_plan, build_aux, custom_plan, extract_learngene
from .store import (StoreError, load_checkpoint, load_learngene, load_logit_cache, save_checkpoint,
                    save_learngene, save_logit_cache)
from .tensor import NumericError
from .train import (DivergenceError, StaleCacheError, TrainConfig, TrainError, cache_teacher_logits,
                    evaluate, train_model)
from .vit import ConfigError, ModelConfig, build_model, count_params

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_DIVERGED = 5

_EPILOG = """exit codes:
  0  success
  2  config or validation problem (bad flag, bad value, inconsistent sections)
  3  file I/O problem (missing path, unreadable file)
  4  malformed or mismatched artifact (bad magic/kind/version, stale cache, bad IDX)
  5  numeric divergence during training
  1  unexpected failure
"""


class CliError(ValueError):
    """Bad invocation or config content."""


# ---- config plumbing -----------------------------------------------------------


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise CliError(f"--set needs section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise CliError(f"--set key {key!r} is malformed")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return path, value


def load_config(path, set_flags: list[str] | None = None, seed: int | None = None) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"{path}: top level must be an object")
    for flag in set_flags or []:
        node_path, value = _parse_override(flag)
        node = cfg
        for part in node_path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError(f"--set {flag!r}: {part!r} is not a section")
        node[node_path[-1]] = value
    if seed is not None:
        cfg.setdefault("train", {})["seed"] = seed
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    section = cfg.get("model")
    if not isinstance(section, dict):
        raise CliError("config needs a 'model' section")
    try:
        return ModelConfig(**section)
    except TypeError as e:
        raise CliError(f"model section: {e}") from None


def plan_from(cfg: dict, depth: int):
    section = cfg.get("plan")
    if not isinstance(section, dict):
        raise CliError("config needs a 'plan' section ({'stages': M} or {'sizes': [...]})")
    if "sizes" in section:
        plan = custom_plan(section["sizes"])
        if plan.total_layers != depth:
            raise CliError(f"plan sizes sum to {plan.total_layers}, model depth is {depth}")
        return plan
    if "stages" in section:
        return balanced_plan(depth, int(section["stages"]))
    raise CliError("plan section needs 'stages' or 'sizes'")


def train_config(cfg: dict, **forced) -> TrainConfig:
    section = dict(cfg.get("train") or {})
    if "betas" in section:
        section["betas"] = tuple(section["betas"])
    section.update(forced)
    try:
        return TrainConfig(**section)
    except TypeError as e:
        raise CliError(f"train section: {e}") from None


def datasets_from(cfg: dict) -> tuple[Dataset, Dataset]:
    section = cfg.get("data")
    if not isinstance(section, dict):
        raise CliError("config needs a 'data' section")
    if "synthetic" in section:
        s = section["synthetic"]
        full = make_synthetic(int(s["n"]), int(s["classes"]), int(s["size"]), int(s.get("seed", 0)))
    elif "idx" in section:
        s = section["idx"]
        full = load_idx(s["images"], s["labels"])
    else:
        raise CliError("data section needs 'synthetic' or 'idx'")
    fraction = float(section.get("train_fraction", 0.8))
    return split(full, fraction, int(section.get("split_seed", 0)))


# ---- run directory helpers --------------------------------------------------------


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(outdir: Path, command: str, resolved: dict, artifacts: list[Path],
                    extra: dict | None = None, started: float | None = None) -> None:
    lines = [
        f"command={command}",
        f"argv={' '.join(sys.argv[1:])}",
        f"package_version={__version__}",
        f"config={json.dumps(resolved, sort_keys=True, separators=(',', ':'))}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    for art in artifacts:
        digest = fnv1a64(Path(art).read_bytes())
        lines.append(f"artifact.{Path(art).name}={digest:#018x}")
    if started is not None:
        lines.append(f"wallclock_seconds={time.perf_counter() - started:.3f}")
    (outdir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _eval_line(tag: str, loss: float, top1: float) -> str:
    return f"{tag}: loss={loss:.6f} top1={top1:.6f}"


# ---- commands -----------------------------------------------------------------------


def cmd_train_teacher(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config, args.set, args.seed)
    out = _outdir(args)
    mcfg = model_config(cfg)
    tcfg = train_config(cfg, alpha=0.0)  # the teacher trains on labels alone
    train_data, val_data = datasets_from(cfg)
    model = build_model(mcfg, tcfg.seed)
    metrics = train_model(model, train_data, val_data, tcfg)
    ckpt = out / "teacher.sws"
    cache_path = out / "teacher_logits.sws"
    save_checkpoint(model, ckpt, provenance={"command": "train-teacher", "seed": tcfg.seed})
    save_logit_cache(cache_teacher_logits(model, train_data), cache_path)
    metrics.write_csv(out / "metrics.csv")
    print(_eval_line("teacher", metrics.final.val_loss, metrics.final.top1))
    _write_manifest(out, "train-teacher", cfg, [ckpt, cache_path, out / "metrics.csv"], started=started)
    return EXIT_OK


def cmd_train_aux(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config, args.set, args.seed)
    out = _outdir(args)
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    plan = plan_from(cfg, mcfg.depth)
    train_data, val_data = datasets_from(cfg)

    teacher = None
    if args.teacher_cache:
        teacher = load_logit_cache(args.teacher_cache)
    elif args.teacher_checkpoint:
        teacher = cache_teacher_logits(load_checkpoint(args.teacher_checkpoint), train_data)
    if tcfg.alpha > 0.0 and teacher is None:
        raise CliError("train.alpha > 0 needs --teacher-cache or --teacher-checkpoint")

    aux = build_aux(mcfg, plan, tcfg.seed)
    metrics = train_model(aux, train_data, val_data, tcfg, teacher)
    ckpt = out / "aux.sws"
    pack_path = out / "learngene.sws"
    save_checkpoint(aux, ckpt, provenance={"command": "train-aux", "seed": tcfg.seed})
    pack = extract_learngene(aux, provenance={"epochs": tcfg.epochs, "seed": tcfg.seed,
                                              "alpha": tcfg.alpha, "tau": tcfg.tau})
    save_learngene(pack, pack_path)
    metrics.write_csv(out / "metrics.csv")
    print(_eval_line("aux", metrics.final.val_loss, metrics.final.top1))
    _write_manifest(out, "train-aux", cfg, [ckpt, pack_path, out / "metrics.csv"], started=started)
    return EXIT_OK


def cmd_init_des(args) -> int:
    started = time.perf_counter()
    out = _outdir(args)
    pack = load_learngene(args.pack)
    spec = DescendantSpec(depth=args.depth, strategy=args.strategy,
                          order=InitOrder.parse(args.order), seed=args.des_seed,
                          classes=args.classes)
    model, report = init_descendant(pack, spec)
    ckpt = out / "descendant.sws"
    save_checkpoint(model, ckpt, provenance={"command": "init-des", "pack": str(args.pack),
                                             "strategy": spec.strategy, "order": str(spec.order),
                                             "seed": spec.seed})
    write_assignment_csv(report, out / "assignment.csv")
    print(f"descendant: depth={args.depth} strategy={spec.strategy} params={count_params(model):,}")
    _write_manifest(out, "init-des", {"pack": str(args.pack), "depth": args.depth,
                                      "strategy": spec.strategy, "order": str(spec.order),
                                      "seed": spec.seed},
                    [ckpt, out / "assignment.csv"], started=started)
    return EXIT_OK


def cmd_finetune(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config, args.set, args.seed)
    out = _outdir(args)
    model = load_checkpoint(args.checkpoint)
    train_data, val_data = datasets_from(cfg)
    forced = {}
    if not args.teacher_cache and "alpha" not in (cfg.get("train") or {}):
        forced["alpha"] = 0.0  # descendants tune on labels unless asked otherwise
    tcfg = train_config(cfg, **forced)
    teacher = load_logit_cache(args.teacher_cache) if args.teacher_cache else None
    if tcfg.alpha > 0.0 and teacher is None:
        raise CliError("train.alpha > 0 needs --teacher-cache")
    metrics = train_model(model, train_data, val_data, tcfg, teacher)
    ckpt = out / "finetuned.sws"
    save_checkpoint(model, ckpt, provenance={"command": "finetune", "seed": tcfg.seed,
                                             "from": str(args.checkpoint)})
    metrics.write_csv(out / "metrics.csv")
    print(_eval_line("finetuned", metrics.final.val_loss, metrics.final.top1))
    _write_manifest(out, "finetune", cfg, [ckpt, out / "metrics.csv"], started=started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config, args.set, None)
    out = _outdir(args)
    model = load_checkpoint(args.checkpoint)
    train_data, val_data = datasets_from(cfg)
    data = {"train": train_data, "val": val_data}[args.split]
    tcfg = train_config(cfg, alpha=0.0, epochs=0)
    loss, top1 = evaluate(model, data, tcfg.eval_batch_size)
    print(_eval_line("eval", loss, top1))
    with open(out / "eval.csv", "w") as fh:
        fh.write("split,loss,top1\n")
        fh.write(f"{args.split},{loss:.6f},{top1:.6f}\n")
    _write_manifest(out, "eval", cfg, [out / "eval.csv"],
                    extra={"checkpoint": str(args.checkpoint), "split": args.split}, started=started)
    return EXIT_OK


def cmd_sweep_depth(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config, args.set, args.seed)
    out = _outdir(args)
    depths = sorted({int(d) for d in args.depths.split(",")})
    if not depths:
        raise CliError("--depths needs at least one depth")
    pack = load_learngene(args.pack)
    vanilla = load_checkpoint(args.vanilla)
    train_data, val_data = datasets_from(cfg)
    order = InitOrder.parse(args.order)

    rows = []
    for depth in depths:
        spec = DescendantSpec(depth=depth, strategy=args.strategy, order=order, seed=args.des_seed)
        des, _ = init_descendant(pack, spec)
        loss, top1 = evaluate(des, val_data)
        rows.append((depth, count_params(des), "sws", loss, top1))

        simple, _ = simple_lg_expand(vanilla, spec)
        loss, top1 = evaluate(simple, val_data)
        rows.append((depth, count_params(simple), "simple_lg", loss, top1))

        if args.scratch_epochs > 0:
            from dataclasses import replace as dc_replace
            tcfg = train_config(cfg, alpha=0.0, epochs=args.scratch_epochs)
            tcfg = dc_replace(tcfg, seed=tcfg.seed + depth)
            scratch = build_model(dc_replace(pack.cfg, depth=depth), tcfg.seed)
            train_model(scratch, train_data, val_data, tcfg)
            loss, top1 = evaluate(scratch, val_data)
            rows.append((depth, count_params(scratch), "scratch", loss, top1))

    rows.sort(key=lambda r: (r[0], r[2]))
    with open(out / "sweep.csv", "w") as fh:
        fh.write("depth,params,method,val_loss,top1\n")
        for depth, params, method, loss, top1 in rows:
            fh.write(f"{depth},{params},{method},{loss:.6f},{top1:.6f}\n")
    for depth, params, method, loss, top1 in rows:
        print(f"depth={depth} method={method} params={params} val_loss={loss:.6f} top1={top1:.6f}")
    _write_manifest(out, "sweep-depth", cfg, [out / "sweep.csv"],
                    extra={"pack": str(args.pack), "vanilla": str(args.vanilla),
                           "depths": ",".join(map(str, depths))}, started=started)
    return EXIT_OK


# ---- argument parsing ------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (JSON literal or bare string); repeatable")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", required=True, help="output directory for artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sws",
        description="Stage-wise weight sharing: tied training, learngene extraction, depth expansion.",
        epilog=_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"sws {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train an untied teacher on labels, cache its logits")
    _add_common(p)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train-aux", help="train the stage-tied auxiliary model, extract the learngene pack")
    _add_common(p)
    p.add_argument("--teacher-cache", default=None, help="logit cache artifact for distillation")
    p.add_argument("--teacher-checkpoint", default=None, help="teacher checkpoint (logits cached on the fly)")
    p.set_defaults(fn=cmd_train_aux)

    p = sub.add_parser("init-des", help="expand a learngene pack into a descendant checkpoint")
    _add_common(p, config=False)
    p.add_argument("--pack", required=True, help="learngene pack artifact")
    p.add_argument("--depth", type=int, required=True, help="descendant depth")
    p.add_argument("--strategy", default="cyclic-contiguous",
                   choices=("cyclic-contiguous", "cyclic-roundrobin", "random"))
    p.add_argument("--order", default="front-mid-last", help="group priority, e.g. front-mid-last")
    p.add_argument("--des-seed", type=int, default=0, help="seed for random strategy / head re-init")
    p.add_argument("--classes", type=int, default=None, help="descendant class count (default: pack's)")
    p.set_defaults(fn=cmd_init_des)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint (labels only unless a cache is given)")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--teacher-cache", default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's data")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep-depth", help="no-tune evaluation of expansions across depths")
    _add_common(p)
    p.add_argument("--pack", required=True)
    p.add_argument("--vanilla", required=True, help="plain checkpoint for the baseline expansion")
    p.add_argument("--depths", required=True, help="comma-separated depths, e.g. 5,6,7,8")
    p.add_argument("--strategy", default="cyclic-contiguous",
                   choices=("cyclic-contiguous", "cyclic-roundrobin", "random"))
    p.add_argument("--order", default="front-mid-last")
    p.add_argument("--des-seed", type=int, default=0)
    p.add_argument("--scratch-epochs", type=int, default=0,
                   help="also train a scratch model per depth for this many epochs")
    p.set_defaults(fn=cmd_sweep_depth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (CliError, ConfigError, PlanError, ExpandError, TrainError, DataError, ValueError) as e:
        if isinstance(e, IdxFormatError):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_FORMAT
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StoreError, StaleCacheError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (DivergenceError, NumericError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # pragma: no cover - last resort
        print(f"unexpected error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
