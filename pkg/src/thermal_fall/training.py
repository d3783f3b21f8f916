"""Reconstruction and adversarial losses, and the alternating training loop.

Every loss returns ``(value, grad)`` where ``grad`` is the gradient of the
value with respect to the reconstructed output (or, for the adversarial
terms, with respect to the discriminator probabilities).
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .models import (
    INITS,
    build_discriminator,
    build_flow_3dcae,
    build_joint_discriminator,
    build_thermal_3dcae,
    save_models,
)
from .tensor import SGD, Adadelta
from .windows import WindowSet

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
LOSS_COLUMNS = ["epoch", "batch", "loss_D", "loss_R_adv", "loss_roi_thermal", "loss_diff",
                "loss_roi_flow", "total"]


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite."""


@dataclass(frozen=True)
class VariantSpec:
    name: str
    channels: Tuple[str, ...]
    roi: bool
    diff: bool
    weights: Tuple[str, ...]
    default_weight: float


VARIANTS: Dict[str, VariantSpec] = {
    v.name: v
    for v in [
        VariantSpec("Thermal-3DCAE", ("thermal",), False, False, ("lam",), 0.1),
        VariantSpec("Flow-3DCAE", ("flow",), False, False, ("lam",), 0.1),
        VariantSpec("Thermal-ROI-3DCAE", ("thermal",), True, False, ("lam",), 0.1),
        VariantSpec("Thermal-Diff-ROI-3DCAE", ("thermal",), True, True, ("lam_s", "lam_d"), 1.0),
        VariantSpec("Flow-ROI-3DCAE", ("flow",), True, False, ("lam",), 0.1),
        VariantSpec("Fusion-ROI-3DCAE", ("thermal", "flow"), True, False, ("lam_t", "lam_f"), 0.1),
        VariantSpec("Fusion-Diff-ROI-3DCAE", ("thermal", "flow"), True, True,
                    ("lam_t_s", "lam_t_d", "lam_f"), 1.0),
    ]
}

LAMBDA_GRID = (0.1, 1.0, 10.0)


def variant_spec(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class LossConfig:
    variant: str = "Fusion-Diff-ROI-3DCAE"
    lam: Optional[float] = None
    lam_s: Optional[float] = None
    lam_d: Optional[float] = None
    lam_t: Optional[float] = None
    lam_f: Optional[float] = None
    lam_t_s: Optional[float] = None
    lam_t_d: Optional[float] = None

    def __post_init__(self):
        spec = variant_spec(self.variant)
        for f in fields(self):
            if f.name == "variant":
                continue
            value = getattr(self, f.name)
            if f.name in spec.weights:
                if value is None:
                    setattr(self, f.name, spec.default_weight)
                elif value < 0:
                    raise ValueError(f"{f.name} must be non-negative, got {value}")
            elif value is not None:
                raise ValueError(f"{f.name} is not used by {self.variant}")

    @property
    def spec(self) -> VariantSpec:
        return variant_spec(self.variant)

    def weight(self, name: str) -> float:
        return float(getattr(self, name))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    seed: int = 0
    d_lr: float = 0.0002
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    adadelta_lr: float = 1.0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    samples_per_epoch: Optional[int] = None  # None: every window once per epoch
    generator_init: str = "normal"  # "normal": N(0, 0.02); "fan_in": N(0, 2 / fan_in)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.generator_init not in INITS:
            raise ValueError(f"generator_init must be one of {INITS}, got {self.generator_init!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---- losses -------------------------------------------------------------

def _log_clamped(p):
    return np.log(np.maximum(p, LOG_CLAMP))


def gan_loss(d_real: np.ndarray, d_fake: np.ndarray):
    """Discriminator loss and the generator's non-saturating adversarial loss.

    Returns ``(loss_D, loss_R_adv)``.
    """
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    loss_d = -(_log_clamped(d_real).mean() + _log_clamped(1 - d_fake).mean())
    loss_r = -_log_clamped(d_fake).mean()
    return float(loss_d), float(loss_r)


def d_real_loss(p):
    p64 = p.astype(np.float64)
    g = np.where(p64 > LOG_CLAMP, -1.0 / (p64 * len(p)), 0.0)
    return float(-_log_clamped(p64).mean()), g.astype(p.dtype)


def d_fake_loss(p):
    q = 1 - p.astype(np.float64)
    g = np.where(q > LOG_CLAMP, 1.0 / (q * len(p)), 0.0)
    return float(-_log_clamped(q).mean()), g.astype(p.dtype)


def generator_adversarial_loss(p):
    """``-mean log D(O)`` and its gradient w.r.t. the probabilities."""
    return d_real_loss(p)


def mse_loss(I, O):
    diff = O.astype(np.float64) - I
    n = diff.size
    return float(np.square(diff).sum() / n), (2.0 / n * diff).astype(O.dtype)


def _mask_like(masks, x):
    m = np.asarray(masks, dtype=bool)
    if m.shape != x.shape:
        m = m.reshape(x.shape)
    return m


def roi_mse_loss(I, O, masks):
    """Squared error averaged over pixels inside the masks only."""
    m = _mask_like(masks, O)
    n = int(m.sum())
    if n == 0:
        warnings.warn("empty ROI mask: roi_mse_loss is 0")
        return 0.0, np.zeros_like(O)
    diff = np.where(m, O.astype(np.float64) - I, 0.0)
    return float(np.square(diff).sum() / n), (2.0 / n * diff).astype(O.dtype)


def diff_frames(window: np.ndarray, masks: Optional[np.ndarray] = None, axis: int = 1):
    """Residuals of consecutive frames along ``axis`` and the union masks.

    Frame ``j`` of the result is frame ``j+1`` minus frame ``j`` of the input.
    """
    window = np.asarray(window)
    if window.shape[axis] < 2:
        raise ValueError("need at least two frames")
    res = np.diff(window, axis=axis)
    if masks is None:
        return res
    masks = np.asarray(masks, dtype=bool)
    n = masks.shape[axis]
    union = np.take(masks, range(n - 1), axis=axis) | np.take(masks, range(1, n), axis=axis)
    return res, union


def diff_loss(I, O, union_masks):
    """ROI-masked squared error between the difference frames of ``I`` and ``O``."""
    dI = diff_frames(I)
    dO = diff_frames(O)
    value, g_dO = roi_mse_loss(dI, dO, union_masks)
    g = np.zeros_like(O)
    g[:, 1:] += g_dO
    g[:, :-1] -= g_dO
    return value, g


@dataclass
class GeneratorLoss:
    total: float
    adversarial: float
    terms: Dict[str, float]
    grad_outputs: Dict[str, np.ndarray]  # gradients of the weighted reconstruction terms
    grad_d_fake: np.ndarray


# loss-log column -> weight name, per variant
TERM_WEIGHTS = {
    "Thermal-3DCAE": {"loss_roi_thermal": "lam"},
    "Flow-3DCAE": {"loss_roi_flow": "lam"},
    "Thermal-ROI-3DCAE": {"loss_roi_thermal": "lam"},
    "Thermal-Diff-ROI-3DCAE": {"loss_roi_thermal": "lam_s", "loss_diff": "lam_d"},
    "Flow-ROI-3DCAE": {"loss_roi_flow": "lam"},
    "Fusion-ROI-3DCAE": {"loss_roi_thermal": "lam_t", "loss_roi_flow": "lam_f"},
    "Fusion-Diff-ROI-3DCAE": {"loss_roi_thermal": "lam_t_s", "loss_diff": "lam_t_d",
                              "loss_roi_flow": "lam_f"},
}


def reconstruction_terms(cfg: LossConfig, batch: Dict[str, np.ndarray],
                         outputs: Dict[str, np.ndarray]):
    """Unweighted reconstruction terms and per-channel gradients of their weighted sum.

    Plain variants log their full-frame MSE in the channel's ROI column.
    """
    spec = cfg.spec
    for ch in spec.channels:
        if ch not in outputs or ch not in batch:
            raise ValueError(f"{spec.name} needs the {ch} channel")
    terms: Dict[str, float] = {}
    grads: Dict[str, np.ndarray] = {}
    for term, wname in TERM_WEIGHTS[spec.name].items():
        if term == "loss_diff":
            ch = "thermal"
            _, union = diff_frames(batch["thermal"][..., 0], batch["thermal_mask"])
            v, g = diff_loss(batch["thermal"], outputs["thermal"], union[..., None])
        else:
            ch = "thermal" if term == "loss_roi_thermal" else "flow"
            I, O = batch[ch], outputs[ch]
            v, g = roi_mse_loss(I, O, batch[f"{ch}_mask"]) if spec.roi else mse_loss(I, O)
        terms[term] = v
        gw = g * g.dtype.type(cfg.weight(wname))
        grads[ch] = grads[ch] + gw if ch in grads else gw
    return terms, grads


def generator_loss(cfg: LossConfig, batch, outputs, d_fake: np.ndarray) -> GeneratorLoss:
    """Adversarial term plus the variant's weighted reconstruction terms."""
    adv, g_p = generator_adversarial_loss(d_fake)
    terms, grads = reconstruction_terms(cfg, batch, outputs)
    w = TERM_WEIGHTS[cfg.variant]
    total = adv + sum(cfg.weight(w[k]) * v for k, v in terms.items())
    return GeneratorLoss(total, adv, terms, grads, g_p)


# ---- models per variant -------------------------------------------------

@dataclass
class VariantModels:
    variant: str
    generators: Dict[str, object]  # channel -> Autoencoder
    discriminator: object

    @property
    def all(self):
        return list(self.generators.values()) + [self.discriminator]

    def reconstruct(self, batch, training=False):
        return {ch: g.forward(batch[ch], training=training) for ch, g in self.generators.items()}


def build_variant_models(variant: str, seed: int = 0, dtype=np.float32,
                         generator_init: str = "normal") -> VariantModels:
    spec = variant_spec(variant)
    gens = {}
    if "thermal" in spec.channels:
        gens["thermal"] = build_thermal_3dcae(seed, dtype, generator_init)
    if "flow" in spec.channels:
        gens["flow"] = build_flow_3dcae(seed, dtype, generator_init)
    if len(spec.channels) == 2:
        disc = build_joint_discriminator(seed, dtype)
    else:
        disc = build_discriminator(spec.channels[0], seed, dtype)
    return VariantModels(variant, gens, disc)


def _masked(x, mask):
    return np.where(mask[..., None] if mask.ndim == x.ndim - 1 else mask, x, x.dtype.type(-1))


def discriminator_inputs(spec: VariantSpec, batch, outputs=None):
    """Windows shown to the discriminator; reconstructions are ROI-masked for ROI variants."""
    xs = []
    for ch in spec.channels:
        if outputs is None:
            xs.append(batch[ch])
        elif spec.roi:
            xs.append(_masked(outputs[ch], batch[f"{ch}_mask"]))
        else:
            xs.append(outputs[ch])
    return xs


# ---- training loop ------------------------------------------------------

@dataclass
class TrainResult:
    models: VariantModels
    log: List[Dict[str, float]] = field(default_factory=list)

    def epoch_means(self, column: str) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for row in self.log:
            v = row.get(column)
            if v is not None and v != "":
                by_epoch.setdefault(int(row["epoch"]), []).append(float(v))
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def reconstruction_curve(self) -> List[float]:
        """Per-epoch mean of the summed unweighted reconstruction terms."""
        by_epoch: Dict[int, List[float]] = {}
        for row in self.log:
            rec = sum(float(row[c]) for c in ("loss_roi_thermal", "loss_diff", "loss_roi_flow")
                      if row.get(c) not in (None, ""))
            by_epoch.setdefault(int(row["epoch"]), []).append(rec)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _check_finite(value, term, epoch, batch):
    if not math.isfinite(value):
        raise TrainingDiverged(f"epoch {epoch} batch {batch}: non-finite {term} ({value})")


def generator_backward(models: VariantModels, cfg: LossConfig, batch, outputs) -> GeneratorLoss:
    """Generator loss on ``outputs`` and its gradients in every generator's ``grads``.

    The discriminator runs in training mode without touching its running
    statistics; it gets gradients too, but they are not used.
    """
    spec = cfg.spec
    disc = models.discriminator
    fake = discriminator_inputs(spec, batch, outputs)
    p_fake = disc.forward(fake, training=True, update_stats=False)
    gl = generator_loss(cfg, batch, outputs, p_fake)
    disc.zero_grad()
    g_inputs = disc.backward(gl.grad_d_fake, need_input_grad=True)
    for ch, g_in in zip(spec.channels, g_inputs):
        if spec.roi:
            # reconstructions are shown to D with -1 outside the ROI
            g_in = np.where(batch[f"{ch}_mask"][..., None], g_in, 0).astype(g_in.dtype)
        total_grad = gl.grad_outputs.get(ch, 0) + g_in
        gen = models.generators[ch]
        gen.zero_grad()
        gen.backward(total_grad.astype(outputs[ch].dtype))
    return gl


def discriminator_step(models: VariantModels, cfg: LossConfig, batch, outputs, d_opt) -> float:
    spec = cfg.spec
    disc = models.discriminator
    disc.zero_grad()
    p_real = disc.forward(discriminator_inputs(spec, batch), training=True)
    l_real, g = d_real_loss(p_real)
    disc.backward(g, need_input_grad=False)
    p_fake = disc.forward(discriminator_inputs(spec, batch, outputs), training=True)
    l_fake, g = d_fake_loss(p_fake)
    disc.backward(g, need_input_grad=False)
    d_opt.step(disc.params(), disc.grads())
    return l_real + l_fake


def train_step(models: VariantModels, cfg: LossConfig, batch, d_opt, g_opts):
    """One discriminator update followed by one generator update.

    The reconstructions of a single forward pass serve both updates.
    """
    outputs = models.reconstruct(batch, training=True)
    loss_d = discriminator_step(models, cfg, batch, outputs, d_opt)
    gl = generator_backward(models, cfg, batch, outputs)
    for ch, gen in models.generators.items():
        g_opts[ch].step(gen.params(), gen.grads())
    return loss_d, gl


def train(
    variant: str,
    data: WindowSet,
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    out_dir=None,
    models: Optional[VariantModels] = None,
) -> TrainResult:
    """Alternating adversarial training; writes loss CSV and checkpoints to ``out_dir``."""
    loss_cfg = loss_cfg or LossConfig(variant=variant)
    if loss_cfg.variant != variant:
        raise ValueError(f"loss config is for {loss_cfg.variant}, not {variant}")
    if len(data) == 0:
        raise ValueError("no training windows")
    spec = loss_cfg.spec
    models = models or build_variant_models(variant, train_cfg.seed,
                                            generator_init=train_cfg.generator_init)
    d_opt = SGD(train_cfg.d_lr)
    g_opts = {
        ch: Adadelta(train_cfg.adadelta_rho, train_cfg.adadelta_eps, train_cfg.adadelta_lr)
        for ch in models.generators
    }
    rng = np.random.default_rng([train_cfg.seed, 100])
    result = TrainResult(models)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(data))
        if train_cfg.samples_per_epoch is not None:
            order = order[: train_cfg.samples_per_epoch]
        for b, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[start : start + train_cfg.batch_size]
            batch = data.batch(idx, roi=spec.roi)
            loss_d, gl = train_step(models, loss_cfg, batch, d_opt, g_opts)
            _check_finite(loss_d, "loss_D", epoch, b)
            _check_finite(gl.adversarial, "loss_R_adv", epoch, b)
            for k, v in gl.terms.items():
                _check_finite(v, k, epoch, b)
            row = {"epoch": epoch, "batch": b, "loss_D": loss_d, "loss_R_adv": gl.adversarial,
                   "loss_roi_thermal": "", "loss_diff": "", "loss_roi_flow": "",
                   "total": gl.total}
            row.update(gl.terms)
            result.log.append(row)
        curve = result.reconstruction_curve()
        log.info("%s epoch %d: reconstruction %.5f", variant, epoch, curve[-1])
        if out_dir is not None and train_cfg.checkpoint_every and \
                epoch % train_cfg.checkpoint_every == 0:
            save_models(out_dir / f"checkpoint_e{epoch:03d}.tfad", models.all)

    if out_dir is not None:
        save_models(out_dir / "checkpoint.tfad", models.all)
        write_loss_log(out_dir / "loss_log.csv", result.log)
        meta = {"variant": variant, "train": asdict(train_cfg), "loss": asdict(loss_cfg)}
        (out_dir / "train_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return result


def write_loss_log(path, rows: Sequence[Dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in LOSS_COLUMNS})


def read_loss_log(path) -> List[Dict]:
    """Rows of a loss log in the in-memory form; unused terms stay ``""``."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {k: (float(v) if v != "" else "") for k, v in r.items()}
            row["epoch"], row["batch"] = int(r["epoch"]), int(r["batch"])
            rows.append(row)
    return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def validation_loss(models: VariantModels, cfg: LossConfig, data: WindowSet,
                    batch_size: int = 16) -> float:
    """Mean summed reconstruction terms over every window, in inference mode."""
    spec = cfg.spec
    total, n = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        batch = data.batch(idx, roi=spec.roi)
        outputs = models.reconstruct(batch, training=False)
        terms, _ = reconstruction_terms(cfg, batch, outputs)
        total += sum(terms.values()) * len(idx)
        n += len(idx)
    return total / n
