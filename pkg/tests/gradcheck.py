"""Central finite-difference check of the analytic gradient."""

import numpy as np

from priorrisk.model import ModelConfig, ModelParams, init_params, loss_and_gradient

STEP = 1e-5
REL_FLOOR = 1e-6  # denominators below this are treated as this (near-zero grads)


def random_instance(seed, variant="prime", batch=4, **cfg_kw):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(feature_dim=6, d_model=4, n_heads=2, n_tokens=3, horizon=4,
                      variant=variant, **cfg_kw)
    params = init_params(cfg, seed)
    # push parameters away from init so heads and attention are not near-degenerate
    params = ModelParams(cfg, {k: v + rng.normal(0, 0.3, v.shape) for k, v in params.items()})
    Xc = rng.normal(size=(batch, cfg.feature_dim))
    Xp = rng.normal(size=(batch, cfg.feature_dim))
    Hgt = (rng.random((batch, cfg.horizon)) < 0.4).astype(float)
    Hgt = np.maximum.accumulate(Hgt, axis=1)
    mask = (rng.random((batch, cfg.horizon)) < 0.8).astype(float)
    return Xc, Xp, Hgt, mask, params


def check(Xc, Xp, Hgt, mask, params, per_tensor=10, seed=0):
    """Return a list of (name, index, analytic, numeric, rel_err)."""
    rng = np.random.default_rng(seed)
    _, grads = loss_and_gradient(Xc, Xp, Hgt, mask, params)
    out = []
    for name, w in params.items():
        flat_idx = rng.choice(w.size, size=min(per_tensor, w.size), replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, w.shape)
            vals = []
            for sign in (1, -1):
                arrays = {n: a.copy() for n, a in params.items()}
                arrays[name][idx] += sign * STEP
                vals.append(loss_and_gradient(Xc, Xp, Hgt, mask, ModelParams(params.config, arrays))[0])
            num = (vals[0] - vals[1]) / (2 * STEP)
            ana = grads[name][idx]
            rel = abs(ana - num) / max(abs(ana), abs(num), REL_FLOOR)
            out.append((name, idx, ana, num, rel))
    return out
