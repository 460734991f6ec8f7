"""Acceptance gate: one PASS/FAIL line per criterion.

Run under pytest (lines appear in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

import functools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gradcheck import check, random_instance  # noqa: E402
from oracles import random_survival, td_auc_pairs, uno_c_pairs  # noqa: E402
from priorrisk.core import SurvivalOutcome, build_label  # noqa: E402
from priorrisk.experiment import default_cohorts, oracle_scores, run_ablation  # noqa: E402
from priorrisk.metrics import (  # noqa: E402
    RiskDataset,
    bootstrap_ci,
    compare_c,
    delong_test,
    report_rows,
    td_auc,
    uno_c_index,
)
from priorrisk.model import (  # noqa: E402
    HazardPrediction,
    ModelConfig,
    ModelParams,
    init_params,
    masked_bce_loss,
    predict_batch,
)
from priorrisk.synthdata import CohortConfig, generate_cohort  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}


def c1_gradients():
    t0 = time.perf_counter()
    worst, n, groups = 0.0, 0, set()
    for seed in range(20):
        kw = {"encoder_hidden": (5,)} if seed % 4 == 3 else {}
        rows = check(*random_instance(seed, "prime", **kw), per_tensor=10, seed=seed)
        n += len(rows)
        worst = max(worst, max(r[-1] for r in rows))
        groups |= {r[0].split(".")[0] for r in rows}
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and n >= 100 and groups >= {"enc", "attn", "base", "time"} and dt < 60
    return ok, f"worst rel err {worst:.2e} over {n} coords in 20 instances ({dt:.1f}s)"


def c2_metric_oracles():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        t, e, r = random_survival(1000 + seed, 200)
        d = RiskDataset.from_arrays(t, e, r, np.repeat(r[:, None], 5, axis=1))
        worst = max(worst, abs(uno_c_index(d, 5) - uno_c_pairs(t, e, r, 5)))
        for h in (1, 2, 3, 4):
            worst = max(worst, abs(td_auc(d, h) - td_auc_pairs(t, e, r, h)))
    dt = time.perf_counter() - t0
    return worst <= 1e-12 and dt < 60, f"max |diff| {worst:.1e} on 50 cohorts of n=200 ({dt:.1f}s)"


def c3_labels():
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        event, ty, T = bool(rng.integers(2)), int(rng.integers(1, 10)), int(rng.integers(1, 8))
        lab = build_label(SurvivalOutcome(event, ty), T)
        t = np.arange(1, T + 1)
        want_h = (t >= ty).astype(int) if event else np.zeros(T, int)
        want_m = np.ones(T, int) if event else (t < ty).astype(int)
        bad += not (np.array_equal(lab.h, want_h) and np.array_equal(lab.mask, want_m))
        H = np.sort(rng.uniform(0.01, 0.99, T))
        loss = masked_bce_loss(HazardPrediction(0.0, np.zeros(T), H), lab)
        H2 = np.where(lab.mask == 0, rng.uniform(-5, 5, T), H)
        loss2 = masked_bce_loss(HazardPrediction(0.0, np.zeros(T), H2), lab)
        bad += loss != loss2
    return bad == 0, f"{bad} mismatches over 1000 outcomes"


def c4_monotone():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(feature_dim=8, d_model=4, n_heads=2, n_tokens=2, horizon=5)
    shapes = {k: v.shape for k, v in init_params(cfg, 0).items()}
    viol = 0
    for _ in range(10_000):
        scale = 10 ** rng.uniform(-1, 1.3)
        p = ModelParams(cfg, {k: rng.normal(0, scale, s) for k, s in shapes.items()})
        H = predict_batch(rng.normal(0, 3, (1, 8)), rng.normal(0, 3, (1, 8)), p)
        viol += bool(np.any(np.diff(H) < 0) or np.any(H <= 0) or np.any(H >= 1))
    return viol == 0, f"{viol} violations in 10000 draws"


def _permutation_p(a, b, y, R=100_000, seed=0):
    """Paired permutation p for AUC_a - AUC_b, swapping a_i/b_i per subject.

    The difference is linear in the swap signs u_i = +-1, so all resamples
    reduce to one matrix-vector product.
    """
    pos, neg = np.flatnonzero(y), np.flatnonzero(~y)

    def psi(x, z):
        return (x[:, None] > z[None, :]) + 0.5 * (x[:, None] == z[None, :])

    d_same = psi(a[pos], a[neg]) - psi(b[pos], b[neg])
    d_cross = psi(b[pos], a[neg]) - psi(a[pos], b[neg])
    coef = np.zeros(len(y))
    coef[pos] = (d_same - d_cross).sum(axis=1) / 2
    coef[neg] = (d_same + d_cross).sum(axis=0) / 2
    coef /= len(pos) * len(neg)
    obs = coef.sum()
    u = np.random.default_rng(seed).choice([-1.0, 1.0], size=(R, len(y)))
    stats = u @ coef
    return float(np.mean(np.abs(stats) >= abs(obs) - 1e-12))


def c5_delong_permutation():
    worst, ps = 0.0, []
    for seed in range(10):
        rng = np.random.default_rng(500 + seed)
        y = rng.random(100) < 0.4
        shared = rng.normal(size=100)
        a = shared + 0.9 * y + rng.normal(0, 0.8, 100)
        b = shared + (0.9 - 0.12 * seed) * y + rng.normal(0, 0.8, 100)
        p_dl = delong_test(a, b, y).p
        p_perm = _permutation_p(a, b, y, seed=seed)
        worst = max(worst, abs(p_dl - p_perm))
        ps.append(p_dl)
    return worst <= 0.02, f"max |p_DeLong - p_perm| {worst:.4f} (DeLong p range {min(ps):.3f}-{max(ps):.3f})"


def c6_comparec_variance():
    ratios = []
    for seed in range(5):
        t, e, r = random_survival(600 + seed, 100)
        rb = r + np.random.default_rng(seed).normal(0, 1.0, 100)
        est = compare_c(t, e, r, rb).var_diff
        diffs = []
        for k in range(2000):
            idx = np.random.default_rng([seed, k]).integers(100, size=100)
            res = compare_c(t[idx], e[idx], r[idx], rb[idx])
            diffs.append(res.c_a - res.c_b)
        ratios.append(est / np.var(diffs, ddof=1))
    ok = all(abs(x - 1) <= 0.2 for x in ratios)
    return ok, "variance ratio U-stat/bootstrap " + ", ".join(f"{x:.3f}" for x in ratios)


@functools.lru_cache(maxsize=None)
def ablation(tag=0):
    t0 = time.perf_counter()
    train, test = default_cohorts()
    out = run_ablation(train, test, n_boot=1000, seed=0)
    out["seconds"] = time.perf_counter() - t0
    return out


def c7_ablation():
    out = ablation()
    c = out["c_index"]
    p = out["compare"].p
    ok = (c["prime"] > c["rp_plus"] > c["baseline"] and c["prime"] - c["baseline"] >= 0.05
          and p < 0.05 and out["seconds"] < 600)
    return ok, (f"C prime {c['prime']:.3f} rp_plus {c['rp_plus']:.3f} baseline {c['baseline']:.3f}; "
                f"diff {c['prime'] - c['baseline']:+.3f}; compareC p {p:.1e}; {out['seconds']:.0f}s")


def c8_subgroups():
    reps = {v: {r.subgroup: r for r in rs} for v, rs in ablation()["reports"].items()}
    gap = reps["prime"]["change"].c_index.point - reps["baseline"]["change"].c_index.point
    drops = {v: r["all"].c_index.point - r["exclude_lt180d"].c_index.point for v, r in reps.items()}
    ok = gap >= 0.05 and all(d >= 0 for d in drops.values())
    return ok, (f"change-group gap {gap:+.3f}; all minus >=180d C: "
                + ", ".join(f"{v} {d:+.3f}" for v, d in drops.items()))


def c9_reproducible():
    first = ablation(0)
    second = ablation(1)
    same = True
    for v in first["reports"]:
        same &= report_rows(first["reports"][v]) == report_rows(second["reports"][v])
        same &= np.array_equal(first["scores"][v].scores, second["scores"][v].scores)
        same &= first["params"][v] == second["params"][v]
    same &= first["compare"] == second["compare"]
    return bool(same), "reports, scores and params identical across two runs" if same else "runs differ"


def c10_bootstrap():
    widths, contained = {}, True
    for n in (200, 800):
        widths[n] = []
        for seed in range(5):
            d = oracle_scores(generate_cohort(CohortConfig(n_patients=n, seed=900 + seed)))
            point = uno_c_index(d)
            ci = bootstrap_ci(uno_c_index, d, B=1000, seed=seed)
            contained &= ci.lo <= point <= ci.hi
            widths[n].append(ci.hi - ci.lo)
    ratios = np.array(widths[800]) / np.array(widths[200])
    ok = contained and np.all(ratios < 0.75)
    return bool(ok), (f"all CIs contain point: {contained}; width ratio n=800/n=200 "
                      + ", ".join(f"{x:.2f}" for x in ratios))


CRITERIA = {
    1: ("gradient vs finite differences", c1_gradients),
    2: ("metrics vs brute-force oracles", c2_metric_oracles),
    3: ("label/mask semantics", c3_labels),
    4: ("cumulative risk monotone in (0,1)", c4_monotone),
    5: ("DeLong vs permutation test", c5_delong_permutation),
    6: ("compareC variance vs bootstrap", c6_comparec_variance),
    7: ("end-to-end ablation ordering", c7_ablation),
    8: ("subgroup direction", c8_subgroups),
    9: ("reproducibility", c9_reproducible),
    10: ("bootstrap behavior", c10_bootstrap),
}


def line(n):
    ok, detail = RESULTS[n]
    return f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {CRITERIA[n][0]}: {detail}"


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    rep = request.config.pluginmanager.get_plugin("terminalreporter")
    if rep is not None and RESULTS:
        rep.write_sep("-", "acceptance criteria")
        for n in sorted(RESULTS):
            rep.write_line(line(n))


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, detail = CRITERIA[n][1]()
    RESULTS[n] = (ok, detail)
    print(line(n))
    assert ok, detail


def test_training_loss_decreases_on_default_cohort():
    for v, hist in ablation()["history"].items():
        tail = np.mean([h[2] for h in hist[-len(hist) // 10:]])
        assert tail < hist[0][2], v


def test_prime_fits_better_than_baseline():
    hist = ablation()["history"]
    final = {v: np.mean([h[2] for h in hist[v][-200:]]) for v in hist}
    assert final["prime"] < final["baseline"]


def test_report_all_cases_equals_direct_c():
    out = ablation()
    for v, reps in out["reports"].items():
        assert reps[0].c_index.point == uno_c_index(out["scores"][v])


if __name__ == "__main__":
    failed = 0
    for n, (_, fn) in CRITERIA.items():
        RESULTS[n] = fn()
        print(line(n), flush=True)
        failed += not RESULTS[n][0]
    sys.exit(1 if failed else 0)
