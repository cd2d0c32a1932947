"""Operator CLI: reproducible phantom generation, training, registration,
enhancement, evaluation, slice export, and the invariant selftest.

Every run writes a manifest (config hash, seed, versions) sufficient to
reproduce its outputs bitwise. Errors exit nonzero with one diagnostic
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as me
from . import pipeline as pl
from . import report, store, volio
from .core import Grid3, Volume
from .networks import FineDirNet, sr_enhance_volume
from .phantom import PhantomSpec
from .pipeline import AblationMode, ModelSet, TrainConfig


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("COSF_THREADS")
    return int(env) if env else 1


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return TrainConfig.from_json(Path(path).read_text(encoding="utf-8"))


def cmd_phantom(args) -> int:
    if args.spec:
        spec = PhantomSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    else:
        spec = PhantomSpec()
    manifest = store.write_phantom_dir(spec, args.out)
    pl.write_run_manifest(Path(args.out) / "run_manifest.json", "phantom", None,
                          spec.seed, {"dataset": str(args.out),
                                      "phases": len(manifest["lr"])})
    print(f"wrote {len(manifest['lr'])} phases + ground truth to {args.out}")
    return 0


def _train_common(args):
    cfg = _load_config(args.config)
    spec, lr, hr, prior, gt = store.load_phantom_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, spec, lr, hr, prior, gt, out


def cmd_train(args) -> int:
    cfg, spec, lr, hr, prior, gt, out = _train_common(args)
    nx, ny, _ = lr.grid.dims
    augment = args.augment and nx == ny
    outputs = {}

    if args.stage == "coarse":
        pairs = pl.build_dataset(lr, augment=augment)
        train, _ = pl.split_pairs(pairs, args.holdout, cfg.seed)
        net, history = pl.pretrain_coarse(cfg, train, epochs=args.epochs,
                                          log_path=out / "train_coarse.csv")
        report.plot_history(history, ("epoch", "lr", "loss"),
                            out / "train_coarse.png", "coarse DIR pretraining")
        prev = store.load_model_dir(out) if (out / "models.json").exists() else ModelSet(None)
        prev.coarse = net
        store.save_model_dir(out, cfg, prev)
        outputs = {"checkpoint": "coarse.ckpt", "log": "train_coarse.csv"}
    elif args.stage == "sr":
        stacks, targets = pl.slice_dataset(lr, hr)
        gen, dis, history = pl.pretrain_sr(cfg, stacks, targets, epochs=args.epochs,
                                           log_path=out / "train_sr.csv")
        report.plot_history(history,
                            ("epoch", "lr", "d_loss", "g_adv", "l1",
                             "one_minus_msssim", "d_acc"),
                            out / "train_sr.png", "2.5D conditional GAN pretraining")
        prev = store.load_model_dir(out) if (out / "models.json").exists() else ModelSet(None)
        prev.generator, prev.discriminator = gen, dis
        store.save_model_dir(out, cfg, prev)
        outputs = {"checkpoints": ["generator.ckpt", "discriminator.ckpt"],
                   "log": "train_sr.csv"}
    else:  # joint
        models = store.load_model_dir(args.models or args.out)
        if models.coarse is None or models.generator is None:
            print("error: joint tuning needs pretrained coarse and sr checkpoints",
                  file=sys.stderr)
            return 2
        if models.fine is None:
            models.fine = FineDirNet(cfg.fine_channels, seed=cfg.seed)
        pairs = pl.build_dataset(lr, augment=False)
        train, _ = pl.split_pairs(pairs, args.holdout, cfg.seed)
        models, history = pl.joint_finetune(cfg, models, train, prior,
                                            epochs=args.epochs,
                                            log_path=out / "train_joint.csv")
        report.plot_history(history, ("epoch", "lr", "loss", "mean_abs_v"),
                            out / "train_joint.png", "joint fine-tuning")
        store.save_model_dir(out, cfg, models)
        outputs = {"checkpoints": ["coarse.ckpt", "generator.ckpt",
                                   "discriminator.ckpt", "fine.ckpt"],
                   "log": "train_joint.csv"}

    pl.write_run_manifest(out / f"run_manifest_{args.stage}.json",
                          f"train {args.stage}", cfg, cfg.seed, outputs)
    print(f"train {args.stage}: done, outputs in {out}")
    return 0


def cmd_register(args) -> int:
    models = store.load_model_dir(args.models)
    moving = volio.read_volume(args.moving)
    fixed = volio.read_volume(args.fixed)
    prior = volio.read_volume(args.prior) if args.prior else None
    bundle = pl.register(models, moving, fixed, prior, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volio.write_dvf(bundle.phi_hat.m2f, out / "phi_hat_m2f.mdvf")
    volio.write_dvf(bundle.phi_hat.f2m, out / "phi_hat_f2m.mdvf")
    volio.write_dvf(bundle.phi_tilde.m2f, out / "phi_tilde_m2f.mdvf")
    volio.write_dvf(bundle.phi_tilde.f2m, out / "phi_tilde_f2m.mdvf")
    volio.write_dvf(bundle.v, out / "v.mdvf")
    volio.write_dvf(bundle.phi_star, out / "phi_star.mdvf")
    for name in ("m_tilde", "f_tilde", "m_star", "f_star",
                 "heat_coarse", "heat_residual", "heat_final"):
        volio.write_volume(getattr(bundle, name), out / f"{name}.mvol")
    report.plot_heatmap_triptych(bundle.heat_coarse, bundle.heat_residual,
                                 bundle.heat_final, out / "heatmaps.png")
    report.plot_slice_panel(
        {"m~": bundle.m_tilde, "f~": bundle.f_tilde, "m*": bundle.m_star},
        out / "panel.png")
    pl.write_run_manifest(out / "run_manifest.json", f"register --mode {args.mode}",
                          None, 0, {"bundle_dir": str(out)})
    print(f"register ({args.mode}): bundle written to {out}")
    return 0


def cmd_enhance(args) -> int:
    models = store.load_model_dir(args.models)
    if models.generator is None:
        print("error: enhance needs a trained sr generator checkpoint", file=sys.stderr)
        return 2
    vol = volio.read_volume(getattr(args, "in"))
    volio.write_volume(sr_enhance_volume(models.generator, vol), args.out)
    print(f"enhanced volume written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    spec, lr, hr, prior, gt = store.load_phantom_dir(args.data)
    methods = tuple(args.methods.split(",")) if args.methods else me.METHODS
    needs_models = any(m not in ("identity", "trilinear_sr_baseline") for m in methods)
    models = store.load_model_dir(args.models) if needs_models else None
    pairs = pl.build_dataset(lr, augment=False)
    if args.holdout > 0:
        _, held = pl.split_pairs(pairs, args.holdout, args.seed)
    else:
        held = pairs
    idx = [(p.phase_i, p.phase_j) for p in held]
    rows = me.evaluate_pairs(models, lr, prior, gt, spec, idx, methods=methods,
                             threads=_threads(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    me.write_metrics_csv(out, rows)
    me.write_summary_json(out.with_suffix(".summary.json"), rows)
    figs = report.plot_grade_boxes(rows, out.parent, reference="fixed")
    figs += report.plot_grade_boxes(rows, out.parent, reference="prior")
    pl.write_run_manifest(out.parent / "run_manifest_evaluate.json", "evaluate",
                          None, args.seed,
                          {"csv": str(out), "figures": [Path(f).name for f in figs]})
    print(f"evaluated {len(idx)} pairs x {len(methods)} methods -> {out}")
    return 0


def cmd_export_slice(args) -> int:
    vol = volio.read_volume(getattr(args, "in"))
    volio.export_slice(vol, args.axis, args.index, (args.center, args.width), args.out)
    print(f"slice written to {args.out}")
    return 0


def cmd_selftest(args) -> int:
    ok = __import__("cosf.checks", fromlist=["run_selftest"]).run_selftest()
    print("selftest:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosf",
                                description="coarse/super-resolve/fine 4D registration")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate a synthetic breathing dataset")
    sp.add_argument("--spec", help="JSON phantom spec (defaults when omitted)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_phantom)

    sp = sub.add_parser("train", help="train one stage")
    sp.add_argument("stage", choices=("coarse", "sr", "joint"))
    sp.add_argument("--config", help="TrainConfig JSON (defaults when omitted)")
    sp.add_argument("--data", required=True, help="phantom dataset directory")
    sp.add_argument("--out", required=True, help="model output directory")
    sp.add_argument("--models", help="pretrained model directory (joint stage)")
    sp.add_argument("--epochs", type=int, default=None,
                    help="override the config epoch count")
    sp.add_argument("--holdout", type=float, default=0.2)
    sp.add_argument("--augment", action="store_true",
                    help="expand pairs by in-plane rotations (square grids)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("register", help="run the cascade on one pair")
    sp.add_argument("--models", required=True)
    sp.add_argument("--moving", required=True)
    sp.add_argument("--fixed", required=True)
    sp.add_argument("--prior")
    sp.add_argument("--mode", default="cosf_full",
                    choices=[m.value for m in AblationMode])
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_register)

    sp = sub.add_parser("enhance", help="super-resolve one volume")
    sp.add_argument("--models", required=True)
    sp.add_argument("--in", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_enhance)

    sp = sub.add_parser("evaluate", help="per-grade metrics table over a dataset")
    sp.add_argument("--models")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="metrics CSV path")
    sp.add_argument("--methods", help="comma list; default all")
    sp.add_argument("--holdout", type=float, default=0.0,
                    help="evaluate only the held-out fraction (0 = all pairs)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("export-slice", help="windowed 16-bit PGM slice export")
    sp.add_argument("--in", required=True)
    sp.add_argument("--axis", default="z", choices=("x", "y", "z"))
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--center", type=float, default=0.4)
    sp.add_argument("--width", type=float, default=0.8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export_slice)

    sp = sub.add_parser("selftest", help="run the invariant suite")
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
