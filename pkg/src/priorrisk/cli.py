"""Command-line entry point: synth, train, eval, compare, subgroup.

Run configs are JSON objects with optional ``cohort``, ``test_cohort``,
``model`` and ``train`` sections; any field left out keeps its default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, DataError, NumericError
from .experiment import (
    DEFAULT_EXPERIMENT_TRAIN,
    DEFAULT_TEST_COHORT,
    DEFAULT_TRAIN_COHORT,
    oracle_scores,
    score_cohort,
    training_samples,
)
from .metrics import (
    compare_c,
    delong_test,
    evaluate_report,
    format_table,
    horizon_labels,
    read_scores,
    report_rows,
    subgroup_report,
    write_report_csv,
    write_scores,
)
from .model import VARIANTS, ModelConfig, init_params, read_checkpoint, write_checkpoint
from .synthdata import CohortConfig, generate_cohort, load_csv, write_csv
from .train import TrainConfig, train, write_history

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

log = logging.getLogger("priorrisk")


@dataclass
class RunConfig:
    cohort: CohortConfig = field(default_factory=lambda: DEFAULT_TRAIN_COHORT)
    test_cohort: CohortConfig = field(default_factory=lambda: DEFAULT_TEST_COHORT)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=lambda: DEFAULT_EXPERIMENT_TRAIN)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(raw) - {"cohort", "test_cohort", "model", "train"}
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
        cfg = cls()
        if "cohort" in raw:
            cfg.cohort = CohortConfig.from_dict({**asdict(DEFAULT_TRAIN_COHORT), **raw["cohort"]})
        if "test_cohort" in raw:
            cfg.test_cohort = CohortConfig.from_dict({**asdict(DEFAULT_TEST_COHORT), **raw["test_cohort"]})
        cfg.model = dict(raw.get("model", {}))
        if "train" in raw:
            known = set(asdict(DEFAULT_EXPERIMENT_TRAIN))
            bad = set(raw["train"]) - known
            if bad:
                raise ConfigError(f"unknown train fields {sorted(bad)}")
            try:
                cfg.train = TrainConfig(**{**asdict(DEFAULT_EXPERIMENT_TRAIN), **raw["train"]})
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        return cfg

    def model_config(self, feature_dim: int, variant: str) -> ModelConfig:
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        opts = {**self.model, "feature_dim": feature_dim, "variant": variant}
        if "encoder_hidden" in opts:
            opts["encoder_hidden"] = tuple(opts["encoder_hidden"])
        try:
            return ModelConfig(**opts)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _with_seed(cfg: CohortConfig, seed):
    return cfg if seed is None else CohortConfig.from_dict({**asdict(cfg), "seed": seed})


def cmd_synth(args) -> int:
    run = RunConfig.load(args.config)
    out = _outdir(args.out)
    train_cfg = _with_seed(run.cohort, args.seed)
    test_seed = None if args.seed is None else args.seed + 1
    test_cfg = _with_seed(run.test_cohort, test_seed)
    for split, cfg in (("train", train_cfg), ("test", test_cfg)):
        cohort = generate_cohort(cfg)
        write_csv(cohort, out / f"{split}.csv")
        cfg.to_json(out / f"{split}_cohort.json")
        s = cohort.summary()
        print(f"{split}: " + ", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    tcfg = run.train if args.seed is None else TrainConfig(**{**asdict(run.train), "seed": args.seed})
    cohort = load_csv(args.data)
    mcfg = run.model_config(cohort.feature_dim, args.variant)
    params0 = init_params(mcfg, args.init_seed)
    params, history = train(training_samples(cohort, mcfg.horizon), params0, tcfg)
    out = _outdir(args.out)
    meta = {"train": asdict(tcfg), "data": str(args.data), "init_seed": args.init_seed}
    write_checkpoint(params, out / f"{args.variant}.ckpt", meta)
    write_history(history, out / f"{args.variant}_history.csv")
    print(f"{args.variant}: {len(history)} steps, final loss {history[-1][2]:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cohort = load_csv(args.data)
    if args.oracle:
        name = "oracle"
        scores = oracle_scores(cohort, args.horizon)
    else:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint unless --oracle is given")
        params, _ = read_checkpoint(args.checkpoint)
        name = params.config.variant
        scores = score_cohort(cohort, params)
    for t in args.horizons:
        if t > scores.horizon:
            raise ConfigError(f"horizon {t} exceeds model horizon {scores.horizon}")
    report = evaluate_report(scores, "all", horizons=args.horizons, n_boot=args.n_boot, seed=args.seed)
    out = _outdir(args.out)
    stem = f"{name}_{args.split}"
    write_scores(scores, out / f"{stem}_scores.csv")
    write_report_csv(report_rows([report], args.split, name), out / f"{stem}_report.csv")
    table = f"[{args.split}] {name}\n" + format_table([report])
    (out / f"{stem}_report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def _check_aligned(a, b):
    if len(a) != len(b):
        raise DataError(f"score sets differ in size ({len(a)} vs {len(b)})")
    for ia, ib in zip(a.ids, b.ids):
        if ia != ib:
            raise DataError(f"subject mismatch: first mismatched id {ia!r} vs {ib!r}")
    if not (np.array_equal(a.time_years, b.time_years) and np.array_equal(a.event, b.event)):
        raise DataError("score sets disagree on outcomes")


def cmd_compare(args) -> int:
    a, b = read_scores(args.a), read_scores(args.b)
    _check_aligned(a, b)
    tau = min(a.horizon, b.horizon)
    res = compare_c(a.time_years, a.event, a.risk, b.risk, tau=tau)
    rows = [("c_index", res.c_a, res.c_b, res.z, res.p)]
    for t in range(1, tau):
        keep, y = horizon_labels(a, t)
        if y.all() or not y.any():
            continue
        d = delong_test(a.horizon_scores(t)[keep], b.horizon_scores(t)[keep], y)
        rows.append((f"auc_{t}yr", d.auc_a, d.auc_b, d.z, d.p))
    lines = [f"{'metric':<10}{'a':>9}{'b':>9}{'z':>9}{'p':>11}"]
    lines += [f"{m:<10}{x:>9.4f}{y:>9.4f}{z:>9.3f}{p:>11.3g}" for m, x, y, z, p in rows]
    table = "\n".join(lines)
    print(table)
    if args.out:
        out = _outdir(args.out)
        with open(out / "compare.csv", "w") as fh:
            fh.write("metric,a,b,z,p\n")
            for r in rows:
                fh.write(",".join([r[0]] + [repr(float(v)) for v in r[1:]]) + "\n")
        (out / "compare.txt").write_text(table + "\n")
    return EXIT_OK


def cmd_subgroup(args) -> int:
    data = read_scores(args.scores)
    ref = None
    if args.reference:
        ref = read_scores(args.reference)
        _check_aligned(data, ref)
    reports = subgroup_report(data, exclusions=args.exclude_days, reference=ref,
                              n_boot=args.n_boot, seed=args.seed, horizons=args.horizons)
    out = _outdir(args.out)
    stem = Path(args.scores).stem.removesuffix("_scores")
    write_report_csv(report_rows(reports, args.split, stem), out / f"{stem}_subgroups.csv")
    table = format_table(reports)
    (out / f"{stem}_subgroups.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="priorrisk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate train/test cohorts")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", default="prime", choices=VARIANTS)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, help="minibatch/prior sampling seed")
    t.add_argument("--init-seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset and report C-index/AUC")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score with the generating hazard")
    e.add_argument("--horizon", type=int, default=5, help="score horizon for --oracle")
    e.add_argument("--horizons", type=int, nargs="+", default=[1, 2, 3, 4])
    e.add_argument("--split", default="test")
    e.add_argument("--n-boot", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="paired significance tests between two score files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("subgroup", help="subgroup report from a score file")
    g.add_argument("scores")
    g.add_argument("--reference", help="baseline scores for p-values")
    g.add_argument("--exclude-days", type=int, default=180)
    g.add_argument("--horizons", type=int, nargs="+", default=[1, 2, 3, 4])
    g.add_argument("--split", default="test")
    g.add_argument("--n-boot", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_subgroup)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
