"""End-to-end workflow: dataset assembly, two-stage training, prior
pre-alignment, joint fine-tuning, and mode-routed registration.

Training is bitwise deterministic for a fixed (config, seed, dataset): all
randomness flows from numpy Generators seeded by the config, iteration
order is seed-derived, and single-threaded numpy kernels are reduction-
order stable.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, asdict, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import losses
from .autograd import Adam, Tensor
from .core import DisplacementField, Grid3, PhiPair, RegistrationPair, Sequence4D, Volume
from .networks import (CoarseDirNet, FineDirNet, SrDiscriminator, SrGenerator,
                       coarse_forward, fine_forward, make_stack_indices,
                       sr_enhance_volume, sr_enhance_volume_t)
from .phantom import augment_rotations, grade_pair
from .warp import (dvf_magnitude, quantize_field, residual_update, upsample_dvf,
                   upsample_dvf_t, warp, warp_channels)

_F32 = np.float32


class TrainingDiverged(RuntimeError):
    """Raised by the divergence guards in the trainers."""


class AblationMode(str, Enum):
    coarse_only = "coarse_only"
    coarse_fine = "coarse_fine"
    cosf_no_prior = "cosf_no_prior"
    cosf_full = "cosf_full"


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters; the single source of determinism."""

    lam1: float = 4.0
    lam2: float = 10.0
    lam3: float = 10.0
    lam4: float = 5.0
    alpha: float = 0.35
    epochs_coarse: int = 500
    epochs_sr: int = 500
    epochs_joint: int = 200
    batch_sr: int = 15
    batch_dir: int = 1
    grad_accum_dir: int = 4
    lr_pretrain: float = 4e-5
    lr_pretrain_decay: float = 0.9
    lr_pretrain_step: int = 30
    lr_joint: float = 5e-5
    lr_joint_decay: float = 0.9
    lr_joint_step: int = 10
    seed: int = 0
    ncc_window: int = 9
    inverse_consistency_weight: float = 0.0
    joint_update_discriminator: bool = False
    prealign_strategy: str = "coarse"     # "coarse" | "identity"
    coarse_channels: tuple[int, int, int, int] = (16, 32, 32, 32)
    fine_channels: tuple[int, int, int, int] = (16, 32, 32, 32)
    sr_base: int = 32

    def __post_init__(self):
        for name in ("lam1", "lam2", "lam3", "lam4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.lr_pretrain <= 0 or self.lr_joint <= 0:
            raise ValueError("learning rates must be > 0")
        if self.prealign_strategy not in ("coarse", "identity"):
            raise ValueError("prealign_strategy must be 'coarse' or 'identity'")
        object.__setattr__(self, "coarse_channels", tuple(self.coarse_channels))
        object.__setattr__(self, "fine_channels", tuple(self.fine_channels))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _pretrain_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr_pretrain * cfg.lr_pretrain_decay ** (epoch // cfg.lr_pretrain_step)


def _joint_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr_joint * cfg.lr_joint_decay ** (epoch // cfg.lr_joint_step)


# ---------------------------------------------------------------------------
# dataset assembly


def build_dataset(seq: Sequence4D, augment: bool = True) -> list[RegistrationPair]:
    """All ordered phase pairs, graded, optionally expanded by rotations."""
    K = len(seq)
    pairs = []
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            p = RegistrationPair(seq[i], seq[j], i, j, grade_pair(i, j, K))
            if augment:
                pairs.extend(augment_rotations(p))
            else:
                pairs.append(p)
    return pairs


def split_pairs(pairs: list[RegistrationPair], holdout_frac: float = 0.2,
                seed: int = 0) -> tuple[list[RegistrationPair], list[RegistrationPair]]:
    """Deterministic grade-stratified train/holdout split."""
    rng = np.random.default_rng(seed)
    by_grade: dict[int, list[int]] = {}
    for idx, p in enumerate(pairs):
        by_grade.setdefault(p.grade, []).append(idx)
    hold = set()
    for grade in sorted(by_grade):
        idxs = by_grade[grade]
        take = max(1, int(round(holdout_frac * len(idxs))))
        chosen = rng.permutation(len(idxs))[:take]
        hold.update(idxs[c] for c in chosen)
    train = [p for i, p in enumerate(pairs) if i not in hold]
    held = [p for i, p in enumerate(pairs) if i in hold]
    return train, held


# ---------------------------------------------------------------------------
# stage 1: coarse DIR pretraining


def _coarse_pair_loss(net: CoarseDirNet, pair: RegistrationPair, cfg: TrainConfig):
    f_t = Tensor(pair.fixed.data[None])
    m_t = Tensor(pair.moving.data[None])
    m2f, f2m = net(f_t, m_t)
    return losses.coarse_loss(Tensor(pair.moving.data), Tensor(pair.fixed.data),
                              m2f, f2m, lam1=cfg.lam1, window=cfg.ncc_window,
                              ic_weight=cfg.inverse_consistency_weight)


def _coarse_baseline(dataset, cfg: TrainConfig) -> float:
    """Mean loss at the identity field (the zero-init starting point)."""
    vals = []
    for pair in dataset:
        zero = Tensor(np.zeros((3,) + pair.fixed.grid.dims, dtype=_F32))
        loss = losses.coarse_loss(Tensor(pair.moving.data), Tensor(pair.fixed.data),
                                  zero, zero, lam1=cfg.lam1, window=cfg.ncc_window)
        vals.append(loss.item())
    return float(np.mean(vals))


def pretrain_coarse(cfg: TrainConfig, dataset: list[RegistrationPair],
                    epochs: int | None = None, log_path=None):
    """Train the coarse DIR net; returns (net, history rows).

    History rows are (epoch, lr, loss). Aborts via TrainingDiverged when
    the epoch loss exceeds the identity-field baseline by twice its
    magnitude for 10 consecutive epochs.
    """
    if not dataset:
        raise ValueError("pretrain_coarse needs a non-empty dataset")
    epochs = cfg.epochs_coarse if epochs is None else epochs
    net = CoarseDirNet(cfg.coarse_channels, seed=cfg.seed)
    opt = Adam(net.named_params(), cfg.lr_pretrain)
    rng = np.random.default_rng(cfg.seed + 1)
    baseline = _coarse_baseline(dataset, cfg)
    history = []
    bad_epochs = 0
    for epoch in range(epochs):
        opt.lr = _pretrain_lr(cfg, epoch)
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), cfg.grad_accum_dir):
            chunk = order[start:start + cfg.grad_accum_dir]
            for k in chunk:
                with ag.Tape():
                    loss = _coarse_pair_loss(net, dataset[k], cfg)
                    scaled = ag.mul(loss, 1.0 / len(chunk))
                    ag.backward(scaled)
                epoch_losses.append(loss.item())
            opt.step()
            opt.zero_grad()
        mean_loss = float(np.mean(epoch_losses))
        history.append((epoch, opt.lr, mean_loss))
        if mean_loss > baseline + 2.0 * abs(baseline):
            bad_epochs += 1
            if bad_epochs >= 10:
                raise TrainingDiverged(
                    f"coarse loss {mean_loss:.4f} stuck above 2x baseline {baseline:.4f}")
        else:
            bad_epochs = 0
    if log_path is not None:
        write_history_csv(log_path, ("epoch", "lr", "loss"), history)
    return net, history


# ---------------------------------------------------------------------------
# stage 1: SR pretraining


def slice_dataset(lr_seq: Sequence4D, hr_seq: Sequence4D):
    """(stack5, hr_slice) training arrays from paired sequences."""
    if len(lr_seq) != len(hr_seq):
        raise ValueError("LR/HR sequences must pair phase by phase")
    nz = lr_seq.grid.dims[2]
    idx = make_stack_indices(nz)
    stacks, targets = [], []
    for lo, hi in zip(lr_seq.phases, hr_seq.phases):
        lo_zxy = lo.data.transpose(2, 0, 1)       # (Z, X, Y)
        hi_zxy = hi.data.transpose(2, 0, 1)
        for z in range(nz):
            stacks.append(lo_zxy[idx[z]])         # (5, X, Y)
            targets.append(hi_zxy[z][None])       # (1, 2X, 2Y)
    return np.stack(stacks), np.stack(targets)


def _set_requires_grad(net, flag: bool):
    for _, p in net.named_params():
        p.requires_grad = flag


def pretrain_sr(cfg: TrainConfig, stacks: np.ndarray, targets: np.ndarray,
                epochs: int | None = None, log_path=None):
    """Adversarial SR pretraining; returns (G, D, history rows).

    One discriminator step then one generator step per batch. History
    rows are (epoch, lr, d_loss, g_adv, l1, ms_ssim_term, d_acc). The
    divergence guard watches the generator L1 term.
    """
    if len(stacks) == 0:
        raise ValueError("pretrain_sr needs paired slices")
    epochs = cfg.epochs_sr if epochs is None else epochs
    gen = SrGenerator(cfg.sr_base, seed=cfg.seed)
    dis = SrDiscriminator(cfg.sr_base, seed=cfg.seed)
    opt_g = Adam(gen.named_params(), cfg.lr_pretrain)
    opt_d = Adam(dis.named_params(), cfg.lr_pretrain)
    rng = np.random.default_rng(cfg.seed + 2)
    hr_shape = tuple(targets.shape[2:])
    baseline_l1 = float(np.mean(np.abs(
        targets.astype(np.float64)
        - ag.resize_linear(Tensor(stacks[:, 2:3]), hr_shape).data)))
    history = []
    bad_epochs = 0
    for epoch in range(epochs):
        lr_now = _pretrain_lr(cfg, epoch)
        opt_g.lr = opt_d.lr = lr_now
        order = rng.permutation(len(stacks))
        ep = {"d_loss": [], "g_adv": [], "l1": [], "ms": [], "acc": []}
        for start in range(0, len(order), cfg.batch_sr):
            sel = order[start:start + cfg.batch_sr]
            lr_b = Tensor(stacks[sel])
            hr_b = Tensor(targets[sel])
            cond = ag.resize_linear(lr_b, hr_shape)

            fake_const = Tensor(gen(lr_b).data)   # off-tape forward for the D step
            _set_requires_grad(gen, False)
            with ag.Tape():
                d_real = dis(ag.concat([cond, hr_b], axis=1))
                d_fake = dis(ag.concat([cond, fake_const], axis=1))
                d_loss, _ = losses.gan_losses(d_real, d_fake)
                ag.backward(d_loss)
            opt_d.step()
            opt_d.zero_grad()
            acc = 0.5 * (float((d_real.data > 0).mean()) + float((d_fake.data < 0).mean()))
            _set_requires_grad(gen, True)

            _set_requires_grad(dis, False)
            with ag.Tape():
                fake = gen(lr_b)
                d_fake_g = dis(ag.concat([cond, fake], axis=1))
                g_adv = losses.bce_logits(d_fake_g, True)
                l1 = ag.mean(ag.absval(ag.sub(hr_b, fake)))
                ms = losses.ms_ssim(hr_b, fake)
                g_total = ag.add(ag.add(g_adv, ag.mul(l1, cfg.lam2)),
                                 ag.mul(ag.sub(1.0, ms), cfg.lam3))
                ag.backward(g_total)
            opt_g.step()
            opt_g.zero_grad()
            _set_requires_grad(dis, True)

            ep["d_loss"].append(d_loss.item())
            ep["g_adv"].append(g_adv.item())
            ep["l1"].append(l1.item())
            ep["ms"].append(1.0 - ms.item())
            ep["acc"].append(acc)
        row = (epoch, lr_now, float(np.mean(ep["d_loss"])), float(np.mean(ep["g_adv"])),
               float(np.mean(ep["l1"])), float(np.mean(ep["ms"])), float(np.mean(ep["acc"])))
        history.append(row)
        if row[4] > 2.0 * baseline_l1:
            bad_epochs += 1
            if bad_epochs >= 10:
                raise TrainingDiverged(
                    f"SR L1 {row[4]:.4f} stuck above 2x the interpolation baseline "
                    f"{baseline_l1:.4f}")
        else:
            bad_epochs = 0
    if log_path is not None:
        write_history_csv(log_path, ("epoch", "lr", "d_loss", "g_adv", "l1",
                                     "one_minus_msssim", "d_acc"), history)
    return gen, dis, history


# ---------------------------------------------------------------------------
# prior pre-alignment


def prealign_prior(p: Volume, m_tilde: Volume, coarse: CoarseDirNet | None,
                   strategy: str = "coarse") -> Volume:
    """Warp the prior toward the (enhanced) moving phase.

    With the "coarse" strategy both volumes are resampled to half the
    in-plane resolution, the trained coarse net predicts the prior-to-phase
    field there, and the prior is warped through the upsampled field. The
    "identity" fallback returns the prior unchanged.
    """
    if p.grid != m_tilde.grid:
        raise ValueError("prior and moving volume must share the HR grid")
    if strategy == "identity":
        return p
    if coarse is None:
        raise ValueError("prealign strategy 'coarse' needs a trained coarse model")
    nx, ny, nz = p.grid.dims
    lr_dims = (nx // 2, ny // 2, nz)
    p_lr = ag.resize_linear(Tensor(p.data[None]), lr_dims).data[0]
    m_lr = ag.resize_linear(Tensor(m_tilde.data[None]), lr_dims).data[0]
    lr_grid = Grid3(lr_dims, (p.grid.spacing[0] * 2, p.grid.spacing[1] * 2,
                              p.grid.spacing[2]))
    pair = coarse_forward(coarse, Volume(lr_grid, m_lr), Volume(lr_grid, p_lr))
    phi = upsample_dvf(pair.m2f, p.grid)
    return warp(p, phi)


# ---------------------------------------------------------------------------
# stage 2: joint fine-tuning


@dataclass
class ModelSet:
    coarse: CoarseDirNet
    generator: SrGenerator | None = None
    discriminator: SrDiscriminator | None = None
    fine: FineDirNet | None = None


def _hr_grid_of(lr_grid: Grid3) -> Grid3:
    nx, ny, nz = lr_grid.dims
    sx, sy, sz = lr_grid.spacing
    return Grid3((2 * nx, 2 * ny, nz), (sx / 2, sy / 2, sz))


def _joint_pair_loss(models: ModelSet, pair: RegistrationPair,
                     p_aligned: Volume | None, cfg: TrainConfig):
    """Build the full stage-3 graph for one pair; returns the loss tensor."""
    lr_dims = pair.fixed.grid.dims
    hr_dims = (2 * lr_dims[0], 2 * lr_dims[1], lr_dims[2])
    f_t = Tensor(pair.fixed.data[None])
    m_t = Tensor(pair.moving.data[None])
    m2f, _ = models.coarse(f_t, m_t)
    phi_tilde = upsample_dvf_t(m2f, lr_dims, hr_dims)
    f_hr = sr_enhance_volume_t(models.generator, f_t)
    m_hr = sr_enhance_volume_t(models.generator, m_t)
    p_t = Tensor(p_aligned.data[None]) if p_aligned is not None else None
    v, phi_star = fine_forward(models.fine, f_hr, m_hr, p_t, phi_tilde)
    f3 = ag.reshape(f_hr, hr_dims)
    m3 = ag.reshape(m_hr, hr_dims)
    p3 = ag.reshape(p_t, hr_dims) if p_t is not None else None
    loss = losses.fine_loss(f3, m3, p3, phi_star, phi_tilde,
                            alpha=cfg.alpha, lam4=cfg.lam4, window=cfg.ncc_window)
    return loss, v, phi_tilde


def joint_finetune(cfg: TrainConfig, models: ModelSet,
                   dataset: list[RegistrationPair], prior: Volume,
                   epochs: int | None = None, log_path=None):
    """End-to-end tuning of coarse + SR generator + fine DIR under the
    stage-3 loss. The discriminator stays frozen unless configured in.

    Prior pre-alignment is computed once per moving phase with the
    pretrained models and cached as constants.
    """
    if models.generator is None or models.fine is None:
        raise ValueError("joint_finetune needs pretrained coarse and SR checkpoints"
                         " plus a fine net")
    epochs = cfg.epochs_joint if epochs is None else epochs
    params = (list(models.coarse.named_params())
              + list(models.generator.named_params())
              + list(models.fine.named_params()))
    if cfg.joint_update_discriminator and models.discriminator is not None:
        params += list(models.discriminator.named_params())
    opt = Adam(params, cfg.lr_joint)
    rng = np.random.default_rng(cfg.seed + 3)

    # cache p_aligned per moving phase (frozen constants during tuning)
    cache: dict[int, Volume | None] = {}
    for pair in dataset:
        if pair.phase_i in cache:
            continue
        m_tilde = sr_enhance_volume(models.generator, pair.moving)
        cache[pair.phase_i] = prealign_prior(prior, m_tilde, models.coarse,
                                             cfg.prealign_strategy)

    history = []
    for epoch in range(epochs):
        opt.lr = _joint_lr(cfg, epoch)
        order = rng.permutation(len(dataset))
        ep_loss, ep_vmag = [], []
        for start in range(0, len(order), cfg.grad_accum_dir):
            chunk = order[start:start + cfg.grad_accum_dir]
            for k in chunk:
                pair = dataset[k]
                with ag.Tape():
                    loss, v, _ = _joint_pair_loss(models, pair,
                                                  cache[pair.phase_i], cfg)
                    ag.backward(ag.mul(loss, 1.0 / len(chunk)))
                ep_loss.append(loss.item())
                ep_vmag.append(float(np.abs(v.data).mean()))
            opt.step()
            opt.zero_grad()
        history.append((epoch, opt.lr, float(np.mean(ep_loss)), float(np.mean(ep_vmag))))
    if log_path is not None:
        write_history_csv(log_path, ("epoch", "lr", "loss", "mean_abs_v"), history)
    return models, history


# ---------------------------------------------------------------------------
# registration (inference)


@dataclass
class RegistrationBundle:
    """Every intermediate the cascade produces for one pair."""

    phi_hat: PhiPair                 # coarse fields, LR grid
    phi_tilde: PhiPair               # upsampled fields, HR grid
    v: DisplacementField             # residual, HR grid
    phi_star: DisplacementField      # final m2f field, HR grid
    m_tilde: Volume                  # enhanced moving image
    f_tilde: Volume                  # enhanced fixed image
    m_star: Volume                   # warp(m_tilde, phi_star)
    f_star: Volume                   # warp(f_tilde, phi_tilde_f2m)
    heat_coarse: Volume              # |phi_tilde_m2f|
    heat_residual: Volume            # |v|
    heat_final: Volume               # |phi_star|


def _trilinear_volume(v: Volume, grid: Grid3) -> Volume:
    out = ag.resize_linear(Tensor(v.data[None]), grid.dims).data[0]
    return Volume(grid, out)


def register(models: ModelSet, m: Volume, f: Volume, p: Volume | None,
             mode: AblationMode | str) -> RegistrationBundle:
    """Run the cascade in one of the ablation modes.

    coarse_only: trilinear upsampling, phi_star = upsampled coarse field.
    coarse_fine: SR replaced by trilinear upsampling; no prior path.
    cosf_no_prior: SR active, prior path fed zeros.
    cosf_full: the complete cascade.

    Exported fields are snapped to a 2**-18 voxel lattice so that
    phi_star = v + phi_tilde and phi_star - phi_tilde = v both hold
    bitwise in float32.
    """
    mode = AblationMode(mode)
    if m.grid != f.grid:
        raise ValueError("moving and fixed volumes must share one grid")
    if models.coarse is None:
        raise ValueError(f"mode {mode.value} needs a trained coarse model")
    if mode in (AblationMode.cosf_full, AblationMode.cosf_no_prior) and models.generator is None:
        raise ValueError(f"mode {mode.value} needs a trained SR generator")
    if mode is not AblationMode.coarse_only and models.fine is None:
        raise ValueError(f"mode {mode.value} needs a trained fine model")
    if mode is AblationMode.cosf_full and p is None:
        raise ValueError("mode cosf_full needs a prior volume")

    hr_grid = _hr_grid_of(m.grid)
    phi_hat = coarse_forward(models.coarse, f, m)
    phi_tilde = PhiPair(upsample_dvf(phi_hat.m2f, hr_grid),
                        upsample_dvf(phi_hat.f2m, hr_grid))

    if mode in (AblationMode.cosf_full, AblationMode.cosf_no_prior):
        m_tilde = sr_enhance_volume(models.generator, m)
        f_tilde = sr_enhance_volume(models.generator, f)
    else:
        m_tilde = _trilinear_volume(m, hr_grid)
        f_tilde = _trilinear_volume(f, hr_grid)

    tilde_q = DisplacementField(hr_grid, quantize_field(phi_tilde.m2f.vectors))
    if mode is AblationMode.coarse_only:
        v = DisplacementField.zero(hr_grid)
        phi_star = tilde_q
    else:
        p_aligned = None
        if mode is AblationMode.cosf_full:
            p_aligned = prealign_prior(p, m_tilde, models.coarse)
        p_t = Tensor(p_aligned.data[None]) if p_aligned is not None else None
        v_t, _ = fine_forward(models.fine, Tensor(f_tilde.data[None]),
                              Tensor(m_tilde.data[None]), p_t,
                              Tensor(tilde_q.vectors))
        v = DisplacementField(hr_grid, quantize_field(v_t.data))
        phi_star = residual_update(v, tilde_q)

    m_star = warp(m_tilde, phi_star)
    f_star = warp(f_tilde, phi_tilde.f2m)
    return RegistrationBundle(
        phi_hat=phi_hat, phi_tilde=phi_tilde, v=v, phi_star=phi_star,
        m_tilde=m_tilde, f_tilde=f_tilde, m_star=m_star, f_star=f_star,
        heat_coarse=dvf_magnitude(tilde_q), heat_residual=dvf_magnitude(v),
        heat_final=dvf_magnitude(phi_star))


# ---------------------------------------------------------------------------
# logging and manifests


def write_history_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def write_run_manifest(path, command: str, cfg: TrainConfig | None, seed: int,
                       outputs: dict) -> None:
    import cosf
    manifest = {
        "schema_version": 1,
        "command": command,
        "config_hash": cfg.config_hash() if cfg is not None else None,
        "seed": seed,
        "versions": {"cosf": cosf.__version__, "numpy": np.__version__},
        "outputs": outputs,
    }
    Path(path).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
