"""On-disk layouts for phantom datasets and model directories."""

from __future__ import annotations

import json
from pathlib import Path

from .core import Sequence4D, Volume
from .networks import CoarseDirNet, FineDirNet, SrDiscriminator, SrGenerator
from .phantom import GroundTruth, PhantomSpec, generate
from .pipeline import ModelSet, TrainConfig
from . import volio


def write_phantom_dir(spec: PhantomSpec, out_dir) -> dict:
    """Generate a phantom and write the full dataset plus its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lr, hr, prior, gt = generate(spec)
    manifest = {
        "schema_version": 1,
        "kind": "phantom",
        "K": spec.K,
        "spec": json.loads(spec.to_json()),
        "lr": [], "hr": [], "gt_lr": [], "gt_hr": [],
        "prior": "prior.mvol",
    }
    for k in range(spec.K):
        names = (f"lr_{k:03d}.mvol", f"hr_{k:03d}.mvol",
                 f"gt_lr_{k:03d}.mdvf", f"gt_hr_{k:03d}.mdvf")
        volio.write_volume(lr[k], out / names[0])
        volio.write_volume(hr[k], out / names[1])
        volio.write_dvf(gt.fields_lr[k], out / names[2])
        volio.write_dvf(gt.fields_hr[k], out / names[3])
        for key, name in zip(("lr", "hr", "gt_lr", "gt_hr"), names):
            manifest[key].append(name)
    volio.write_volume(prior, out / "prior.mvol")
    manifest["amplitudes"] = list(gt.amplitudes)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n",
                                       encoding="utf-8")
    return manifest


def load_phantom_dir(data_dir):
    """Read a phantom dataset back: (spec, lr, hr, prior, gt)."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("kind") != "phantom":
        raise ValueError(f"{root}: not a phantom dataset directory")
    spec = PhantomSpec.from_json(json.dumps(manifest["spec"]))
    lr = Sequence4D([volio.read_volume(root / n) for n in manifest["lr"]])
    hr = Sequence4D([volio.read_volume(root / n) for n in manifest["hr"]])
    prior = volio.read_volume(root / manifest["prior"])
    gt = GroundTruth(
        tuple(volio.read_dvf(root / n) for n in manifest["gt_lr"]),
        tuple(volio.read_dvf(root / n) for n in manifest["gt_hr"]),
        tuple(manifest["amplitudes"]),
    )
    return spec, lr, hr, prior, gt


def save_model_dir(models_dir, cfg: TrainConfig, models: ModelSet) -> dict:
    """Write available checkpoints plus the architecture metadata file."""
    root = Path(models_dir)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": 1,
        "coarse_channels": list(cfg.coarse_channels),
        "fine_channels": list(cfg.fine_channels),
        "sr_base": cfg.sr_base,
        "checkpoints": {},
    }
    for name, model in (("coarse", models.coarse), ("generator", models.generator),
                        ("discriminator", models.discriminator), ("fine", models.fine)):
        if model is None:
            continue
        model.save(root / f"{name}.ckpt")
        meta["checkpoints"][name] = f"{name}.ckpt"
    (root / "models.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return meta


def load_model_dir(models_dir) -> ModelSet:
    """Rebuild whatever models a directory holds."""
    root = Path(models_dir)
    meta_path = root / "models.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{root}: missing models.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    ck = meta.get("checkpoints", {})
    models = ModelSet(coarse=None)
    if "coarse" in ck:
        models.coarse = CoarseDirNet(tuple(meta["coarse_channels"])).load(root / ck["coarse"])
    if "generator" in ck:
        models.generator = SrGenerator(meta["sr_base"]).load(root / ck["generator"])
    if "discriminator" in ck:
        models.discriminator = SrDiscriminator(meta["sr_base"]).load(root / ck["discriminator"])
    if "fine" in ck:
        models.fine = FineDirNet(tuple(meta["fine_channels"])).load(root / ck["fine"])
    return models
