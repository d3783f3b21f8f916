"""Shared fixtures-as-functions for the test modules."""
import numpy as np

from thermal_fall import training as tr
from thermal_fall.tensor import relative_error
from thermal_fall.windows import SubVideoArrays

# every generator loss: plain, ROI, difference-constrained, fusion
GRAD_VARIANTS = list(tr.VARIANTS)


def random_batch(rng, n=1, dtype=np.float64):
    th = rng.uniform(-1, 1, (n, 8, 64, 64, 1)).astype(dtype)
    fl = rng.uniform(-1, 1, (n, 7, 64, 64, 1)).astype(dtype)
    tm = np.zeros((n, 8, 64, 64), bool)
    for k in range(8):
        y, x = rng.integers(10, 30, 2)
        tm[:, k, y : y + 20, x : x + 12] = True
    fm = tm[:, 1:] | tm[:, :-1]
    th = np.where(tm[..., None], th, -1.0).astype(dtype)
    fl = np.where(fm[..., None], fl, -1.0).astype(dtype)
    return {"thermal": th, "thermal_mask": tm, "flow": fl, "flow_mask": fm}


def fake_subvideo(rng, n, vid="v"):
    mask = np.zeros((n, 64, 64), bool)
    mask[:, 10:40, 20:30] = True
    th = rng.uniform(-1, 1, (n, 64, 64)).astype(np.float32)
    fl = rng.uniform(-1, 1, (n - 1, 64, 64)).astype(np.float32)
    return SubVideoArrays(vid, np.arange(n) * 2, th, np.where(mask, th, -1), mask, fl,
                          np.where(mask[1:], fl, -1), mask[1:] | mask[:-1],
                          (rng.random(n) < 0.3).astype(np.int64))


def generator_gradcheck(variant, seed=0, n_dirs=2, n_coords=1, eps=1e-8, weight_scale=10.0):
    """Worst relative error of the analytic generator gradient on a 1-sample batch.

    Probes random directions over all generator parameters plus the
    largest-gradient coordinate of each tensor. At the N(0, 0.02)
    initialisation the reconstructions are almost constant, the
    discriminator's batch norm then magnifies every leaky-ReLU kink and
    central differences straddle them; generator weights are therefore
    scaled up so activations spread out, and eps is kept small.
    """
    rng = np.random.default_rng(seed)
    models = tr.build_variant_models(variant, seed)
    for m in models.all:
        m.astype(np.float64)
    for g in models.generators.values():
        for k, p in g.params().items():
            if k.endswith("weight"):
                p *= weight_scale
    cfg = tr.LossConfig(variant)
    batch = random_batch(rng)
    params = [p for g in models.generators.values() for p in g.params().values()]

    def loss():
        out = models.reconstruct(batch, training=True)
        p = models.discriminator.forward(tr.discriminator_inputs(cfg.spec, batch, out),
                                         training=True, update_stats=False)
        return tr.generator_loss(cfg, batch, out, p).total

    out = models.reconstruct(batch, training=True)
    tr.generator_backward(models, cfg, batch, out)
    grads = [np.array(g) for gen in models.generators.values() for g in gen.grads().values()]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(p.shape) for p in params]
        for p, d in zip(params, dirs):
            p += eps * d
        lp = loss()
        for p, d in zip(params, dirs):
            p -= 2 * eps * d
        lm = loss()
        for p, d in zip(params, dirs):
            p += eps * d
        ana = sum(float(np.vdot(g, d)) for g, d in zip(grads, dirs))
        worst = max(worst, float(relative_error(ana, (lp - lm) / (2 * eps))))
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in np.argsort(-np.abs(gflat))[:n_coords]:
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            worst = max(worst, float(relative_error(gflat[i], (lp - lm) / (2 * eps))))
    return worst
