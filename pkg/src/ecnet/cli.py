"""Command-line entry point.

Every verb writes one JSON document to stdout and human-readable notes to
stderr. The exit status is 0 only when all of the command's internal checks
pass; usage errors exit with 2.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import budget as B
from . import gradcheck, registry
from .assignment import brute_force_match, build_cost_matrix, hungarian
from .distill import DistillConfig, run_distillation, synthetic_images
from .ecvit import build_backbone
from .losses import total_loss
from .model import build_model, forward, random_image
from .params import Init, manifest, save
from .scenes import perfect_predictions, random_predictions, random_scene
from .tensorkit import ConfigError, DimensionError

SCHEMA_VERSION = "1.0"
TOLERANCE = 0.2
DEMO = {"images": 512, "size": 64, "batch": 16, "base_lr": 0.01, "epochs": 50}

log = logging.getLogger("ecnet")


def _emit(payload: dict, args) -> None:
    doc = {"spec_version": SCHEMA_VERSION, **payload}
    text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default)
    print(text)
    if args.json:
        Path(args.json).write_text(text + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _entry(args) -> registry.RegistryEntry:
    if args.config:
        ent = registry.load_entry(args.config)
    else:
        # the smallest detector is the default target
        ent = registry.entry(args.name or "S", args.task or "det")
    overrides = {}
    for flag in ("register_count", "stem_dilation", "patch_embed"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    cfg = ent.config.with_backbone(**overrides) if overrides else ent.config
    fusion = getattr(args, "fusion", None)
    layers = getattr(args, "fusion_layers", None)
    if fusion or layers:
        cfg = replace(cfg, fusion=fusion or cfg.fusion, fusion_layers=tuple(layers) if layers else cfg.fusion_layers)
    return replace(ent, config=cfg)


# ---------------------------------------------------------------------------
# verbs


def cmd_build(args) -> int:
    ent = _entry(args)
    model = build_model(ent.config, args.seed)
    bb, dec = ent.config.backbone, ent.config.decoder
    payload = {
        "command": "build",
        "name": ent.name,
        "task": ent.task,
        "seed": args.seed,
        "embed_dim": bb.embed_dim,
        "heads": bb.heads,
        "queries": dec.queries,
        "register_count": bb.register_count,
        "config": asdict(ent.config),
        "params_total": model.num_params,
        "manifest": manifest(model.params),
    }
    if args.out:
        bin_path, meta_path = save(model.params, args.out, {"name": ent.name, "task": ent.task, "seed": args.seed})
        payload["files"] = [str(bin_path), str(meta_path)]
    _emit(payload, args)
    print(f"built {ent.label}: {model.num_params:,} parameters", file=sys.stderr)
    return 0


def _target_checks(ent: registry.RegistryEntry, report: B.BudgetReport) -> dict:
    targets = [ent.targets]
    alt = registry.ALT_TARGETS.get((ent.task, ent.name))
    if alt:
        targets.append(alt)
    params_m = report.params_total / 1e6
    lo, hi = report.flops_1x / 1e9 * (1 - TOLERANCE), report.flops_2x / 1e9 * (1 + TOLERANCE)
    params_ok = any(abs(params_m - p) <= TOLERANCE * p for p, _ in targets)
    flops_ok = any(lo <= g <= hi for _, g in targets)
    return {
        "targets": [{"params_m": p, "gflops": g} for p, g in targets],
        "params_m": params_m,
        "gflops_bracket": [lo, hi],
        "params_ok": params_ok,
        "flops_ok": flops_ok,
    }


def cmd_profile(args) -> int:
    ent = _entry(args)
    size = args.input or registry.INPUT_SIZE
    report = B.budget(ent.config, size, name=ent.label,
                      targets={"params_m": ent.targets[0], "gflops": ent.targets[1]})
    checks = _target_checks(ent, report) if size == registry.INPUT_SIZE else {}
    _emit({"command": "profile", "report": report.to_dict(), "checks": checks}, args)
    print(report.table(), file=sys.stderr)
    if not checks:
        return 0
    ok = checks["params_ok"] and checks["flops_ok"]
    print(f"{ent.label}: params {'ok' if checks['params_ok'] else 'MISS'}, "
          f"GFLOPs {'ok' if checks['flops_ok'] else 'MISS'}", file=sys.stderr)
    return 0 if ok else 1


def _checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if a is not None:
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()


def cmd_forward(args) -> int:
    ent = _entry(args)
    size = args.input or registry.INPUT_SIZE
    model = build_model(ent.config, args.seed)
    res = forward(model, random_image(args.seed, size))
    final = res.predictions
    shape = lambda a: None if a is None else list(a.shape)  # noqa: E731
    stages = {
        "stem_tokens": shape(res.backbone.stem_tokens),
        "block_tokens": shape(res.backbone.block_tokens[-1]),
        "fused": shape(res.fused),
        "pyramid": [shape(x) for x in res.pyramid.levels()],
        "encoder": [shape(x) for x in res.encoded.levels()],
        "class_logits": shape(final.class_logits),
        "boxes": shape(final.boxes),
        "keypoints": shape(final.keypoints),
        "mask_logits": shape(final.mask_logits),
    }
    in_range = bool(np.all((final.boxes >= 0) & (final.boxes <= 1)))
    if final.keypoints is not None:
        in_range &= bool(np.all((final.keypoints >= 0) & (final.keypoints <= 1)))
    arrays = [a for p in res.decoded.layers for a in (p.class_logits, p.boxes, p.keypoints, p.mask_logits)]
    _emit({"command": "forward", "name": ent.name, "task": ent.task, "seed": args.seed, "input": [size, size],
           "shapes": stages, "outputs_in_unit_range": in_range, "checksum": _checksum(arrays)}, args)
    return 0 if in_range else 1


def cmd_match(args) -> int:
    seqs = np.random.SeedSequence(args.seed).spawn(args.trials)
    agree = 0
    first = None
    for ss in seqs:
        rng = np.random.default_rng(ss)
        if args.task:
            task = registry.TASKS[args.task]
            gt = random_scene(rng, args.gt, task, mask_size=(32, 32))
            pred = random_predictions(rng, args.queries, task, mask_size=(8, 8))
            cost = build_cost_matrix(pred, gt, registry.entry("S", args.task).weights, task)
        elif args.ties:
            cost = rng.integers(0, args.ties, (args.gt, args.queries)).astype(float)
        else:
            cost = rng.random((args.gt, args.queries))
        h, o = hungarian(cost), brute_force_match(cost)
        agree += h == o
        first = first or h
    verdict = f"oracle agreement {agree}/{args.trials}"
    _emit({"command": "match", "gt": args.gt, "queries": args.queries, "trials": args.trials,
           "agreement": agree, "verdict": verdict, "first": first.to_dict() if first else None}, args)
    print(verdict, file=sys.stderr)
    return 0 if agree == args.trials else 1


def cmd_loss(args) -> int:
    task = registry.TASKS[args.task]
    rng = np.random.default_rng(args.seed)
    weights = registry.entry("S", args.task).weights
    n_cls = 1 if task == "pose" else 80
    gt = random_scene(rng, args.gt, task, num_classes=n_cls, mask_size=(64, 64))
    preds = []
    for _ in range(args.layers):
        if args.perfect:
            preds.append(perfect_predictions(gt, n_cls, mask_size=(16, 16)))
        else:
            preds.append(random_predictions(rng, args.queries, task, n_cls, mask_size=(16, 16)))
    matches = [hungarian(build_cost_matrix(p, gt, weights, task)) for p in preds]
    report = total_loss(task, preds, gt, matches, weights)
    _emit({"command": "loss", "task": args.task, "gt": args.gt, "layers": args.layers,
           "report": report.to_dict()}, args)
    return 0 if np.isfinite(report.total) else 1


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed, args.trials)
    worst = max(r.max_rel_error / r.tolerance for r in results)
    ok = all(r.ok for r in results)
    _emit({"command": "gradcheck", "results": [r.to_dict() for r in results], "ok": ok,
           "max_rel_error": max(r.max_rel_error for r in results)}, args)
    for r in results:
        print(f"{r.name:<14} max rel err {r.max_rel_error:.2e} (tol {r.tolerance:g})", file=sys.stderr)
    log.debug("worst error/tolerance ratio %.3g", worst)
    return 0 if ok else 1


def cmd_distill_demo(args) -> int:
    teacher = args.teacher.replace("-", "_")
    ent = registry.entry("S", "det")
    bcfg = ent.config.backbone
    cfg = DistillConfig(teacher=teacher, base_lr=args.base_lr, batch=args.batch, epochs=args.epochs,
                        warmup_epochs=min(5, args.epochs))
    student = build_backbone(bcfg, Init(np.random.default_rng(args.seed)))
    images = synthetic_images(args.images, args.size, args.seed)
    result = run_distillation(student, bcfg, images, cfg, seed=args.seed)
    converged = result.final_loss < 1e-3
    monotone = result.is_non_increasing(0.05)
    ok = (converged and monotone) if teacher == "linear_probe" else bool(np.isfinite(result.final_loss))
    _emit({"command": "distill-demo", "teacher": teacher, "images": args.images, "size": args.size,
           "config": asdict(cfg), "peak_lr": cfg.peak_lr, "epoch_losses": result.epoch_losses,
           "final_loss": result.final_loss, "non_increasing": monotone, "converged": converged, "ok": ok}, args)
    print(f"final loss {result.final_loss:.3e} after {args.epochs} epochs", file=sys.stderr)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so a flag
    # given before the verb is not reset by the subparser
    def d(value):
        return argparse.SUPPRESS if suppress else value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    common.add_argument("--input", type=int, default=d(None), help="square input size in pixels")
    common.add_argument("--json", metavar="PATH", default=d(None), help="also write the JSON report to PATH")
    common.add_argument("--config", metavar="PATH", default=d(None), help="JSON registry entry to use instead of a name")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="ecnet", description=__doc__.splitlines()[0], parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", required=True)

    def model_cmd(name, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.add_argument("name", nargs="?", choices=registry.NAMES)
        p.add_argument("task", nargs="?", choices=list(registry.TASKS))
        p.add_argument("--register-count", type=int)
        p.add_argument("--stem-dilation", type=int)
        p.add_argument("--patch-embed", choices=["conv_stem", "vanilla16"])
        p.add_argument("--fusion", choices=["mean", "concat"])
        p.add_argument("--fusion-layers", type=int, nargs="+")
        return p

    p = model_cmd("build", "construct a model and print its parameter manifest")
    p.add_argument("--out", metavar="PATH", help="write weights (.bin) and manifest (.json)")
    p.set_defaults(func=cmd_build)
    model_cmd("profile", "parameter and MAC budget against reference targets").set_defaults(func=cmd_profile)
    model_cmd("forward", "run a random image through the model").set_defaults(func=cmd_forward)

    p = sub.add_parser("match", help="Hungarian matching vs the brute-force oracle", parents=[common])
    p.add_argument("--gt", type=int, default=5)
    p.add_argument("--queries", type=int, default=7)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--ties", type=int, default=0, metavar="LEVELS", help="quantize costs to LEVELS integer values")
    p.add_argument("--task", choices=list(registry.TASKS), help="build costs from synthetic scenes of this task")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("loss", help="itemized loss on a synthetic scene", parents=[common])
    p.add_argument("--task", choices=list(registry.TASKS), default="det")
    p.add_argument("--gt", type=int, default=5)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--perfect", action="store_true", help="use predictions equal to the ground truth")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", help="analytic gradients vs finite differences", parents=[common])
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("distill-demo", help="adapter distillation on synthetic images", parents=[common])
    p.add_argument("--teacher", choices=["linear-probe", "mockS", "mockB"], default="linear-probe")
    p.add_argument("--images", type=int, default=DEMO["images"])
    p.add_argument("--size", type=int, default=DEMO["size"])
    p.add_argument("--epochs", type=int, default=DEMO["epochs"])
    p.add_argument("--batch", type=int, default=DEMO["batch"])
    p.add_argument("--base-lr", type=float, default=DEMO["base_lr"])
    p.set_defaults(func=cmd_distill_demo)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DimensionError) as exc:
        parser.error(str(exc))  # exits with status 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
