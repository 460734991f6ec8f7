import csv
import json

import numpy as np
import pytest

from priorrisk.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from priorrisk.experiment import oracle_scores
from priorrisk.metrics import read_scores, uno_c_index
from priorrisk.model import read_checkpoint
from priorrisk.synthdata import load_csv
from priorrisk.train import read_history

SMALL = {
    "cohort": {"n_patients": 160, "seed": 1},
    "test_cohort": {"n_patients": 120, "seed": 2},
    "model": {"d_model": 4, "n_heads": 2, "n_tokens": 2},
    "train": {"total_steps": 60, "lr0": 0.05},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.json").write_text(json.dumps(SMALL))
    assert main(["synth", "--config", str(root / "run.json"), "--out", str(root / "data")]) == EXIT_OK
    for v in ("baseline", "prime"):
        rc = main(["train", "--data", str(root / "data/train.csv"), "--variant", v,
                   "--config", str(root / "run.json"), "--out", str(root / "ckpt")])
        assert rc == EXIT_OK
    return root


def run(*args):
    return main([str(a) for a in args])


class TestSynth:
    def test_files_and_counts(self, workdir, capsys):
        train = load_csv(workdir / "data/train.csv")
        assert len(train) == 160
        assert len(load_csv(workdir / "data/test.csv")) == 120
        assert json.loads((workdir / "data/train_cohort.json").read_text())["n_patients"] == 160

    def test_summary_printed(self, workdir, tmp_path, capsys):
        assert run("synth", "--config", workdir / "run.json", "--out", tmp_path) == EXIT_OK
        out = capsys.readouterr().out
        assert "train: patients=160" in out and "censoring_rate=" in out

    def test_same_seed_byte_identical(self, workdir, tmp_path):
        assert run("synth", "--config", workdir / "run.json", "--out", tmp_path / "again") == EXIT_OK
        for f in ("train.csv", "test.csv"):
            assert (tmp_path / "again" / f).read_bytes() == (workdir / "data" / f).read_bytes()

    def test_seed_flag(self, workdir, tmp_path):
        assert run("synth", "--config", workdir / "run.json", "--seed", 77, "--out", tmp_path) == EXIT_OK
        assert json.loads((tmp_path / "train_cohort.json").read_text())["seed"] == 77
        assert json.loads((tmp_path / "test_cohort.json").read_text())["seed"] == 78

    def test_zero_patients(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"cohort": {"n_patients": 0}}))
        assert run("synth", "--config", tmp_path / "bad.json", "--out", tmp_path) == EXIT_CONFIG

    @pytest.mark.parametrize("text", ["{not json", '{"optimizer": {}}', '{"train": {"lr": 1}}', "[1, 2]"])
    def test_bad_config(self, tmp_path, text):
        (tmp_path / "bad.json").write_text(text)
        assert run("synth", "--config", tmp_path / "bad.json", "--out", tmp_path) == EXIT_CONFIG


class TestTrain:
    def test_outputs(self, workdir):
        hist = read_history(workdir / "ckpt/baseline_history.csv")
        assert len(hist) == SMALL["train"]["total_steps"]
        params, meta = read_checkpoint(workdir / "ckpt/baseline.ckpt")
        assert params.config.variant == "baseline" and params.config.d_model == 4
        assert meta["train"]["total_steps"] == 60

    def test_deterministic(self, workdir, tmp_path):
        assert run("train", "--data", workdir / "data/train.csv", "--variant", "prime",
                   "--config", workdir / "run.json", "--out", tmp_path) == EXIT_OK
        assert (tmp_path / "prime.ckpt").read_bytes() == (workdir / "ckpt/prime.ckpt").read_bytes()

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "none.csv", "--out", tmp_path) == EXIT_DATA

    def test_numeric_failure(self, workdir, tmp_path):
        cfg = {**SMALL, "train": {"total_steps": 30, "lr0": 1e300, "reduction": "sum"}}
        (tmp_path / "hot.json").write_text(json.dumps(cfg))
        rc = run("train", "--data", workdir / "data/train.csv", "--config", tmp_path / "hot.json",
                 "--out", tmp_path)
        assert rc == EXIT_NUMERIC

    def test_single_exam_patient_rejected(self, workdir, tmp_path):
        lines = (workdir / "data/train.csv").read_text().splitlines()
        pid = lines[1].split(",")[0]
        kept = [lines[0]] + [l for l in lines[1:] if not l.startswith(pid + ",")]
        first = [l for l in lines[1:] if l.startswith(pid + ",")][-1]
        (tmp_path / "t.csv").write_text("\n".join(kept + [first]) + "\n")
        assert run("train", "--data", tmp_path / "t.csv", "--out", tmp_path) == EXIT_DATA


class TestEval:
    def test_train_and_test_splits(self, workdir, tmp_path):
        for split in ("train", "test"):
            rc = run("eval", "--data", workdir / f"data/{split}.csv", "--checkpoint", workdir / "ckpt/prime.ckpt",
                     "--split", split, "--n-boot", 20, "--out", tmp_path)
            assert rc == EXIT_OK
        for split in ("train", "test"):
            rows = list(csv.DictReader(open(tmp_path / f"prime_{split}_report.csv")))
            assert {r["split"] for r in rows} == {split}
            assert (tmp_path / f"prime_{split}_report.txt").read_text().startswith(f"[{split}] prime")

    def test_oracle_matches_direct(self, workdir, tmp_path):
        assert run("eval", "--data", workdir / "data/test.csv", "--oracle", "--n-boot", 10,
                   "--out", tmp_path) == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "oracle_test_report.csv")))
        c_row = next(r for r in rows if r["metric"] == "c_index")
        direct = uno_c_index(oracle_scores(load_csv(workdir / "data/test.csv")))
        assert float(c_row["point"]) == direct

    def test_insufficient_cell_flagged(self, workdir, tmp_path):
        # keep censored patients plus only two cancers: 4-year AUC lacks cases
        lines = (workdir / "data/test.csv").read_text().splitlines()
        header = lines[0].split(",")
        ev = header.index("event")
        cases = sorted({l.split(",")[0] for l in lines[1:] if l.split(",")[ev] == "1"})[:2]
        kept = [lines[0]] + [l for l in lines[1:] if l.split(",")[ev] == "0" or l.split(",")[0] in cases]
        (tmp_path / "few.csv").write_text("\n".join(kept) + "\n")
        assert run("eval", "--data", tmp_path / "few.csv", "--checkpoint", workdir / "ckpt/prime.ckpt",
                   "--n-boot", 10, "--out", tmp_path) == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "prime_test_report.csv")))
        four = next(r for r in rows if r["metric"] == "td_auc" and r["horizon"] == "4")
        assert four["insufficient"] == "1"

    def test_horizon_too_long(self, workdir, tmp_path):
        rc = run("eval", "--data", workdir / "data/test.csv", "--checkpoint", workdir / "ckpt/prime.ckpt",
                 "--horizons", 1, 9, "--out", tmp_path)
        assert rc == EXIT_CONFIG

    def test_needs_checkpoint(self, workdir, tmp_path):
        assert run("eval", "--data", workdir / "data/test.csv", "--out", tmp_path) == EXIT_CONFIG

    def test_uses_closest_prior(self, workdir, tmp_path):
        run("eval", "--data", workdir / "data/test.csv", "--checkpoint", workdir / "ckpt/prime.ckpt",
            "--n-boot", 5, "--out", tmp_path)
        a = read_scores(tmp_path / "prime_test_scores.csv")
        run("eval", "--data", workdir / "data/test.csv", "--checkpoint", workdir / "ckpt/prime.ckpt",
            "--n-boot", 5, "--seed", 3, "--out", tmp_path / "b")
        b = read_scores(tmp_path / "b/prime_test_scores.csv")
        assert np.array_equal(a.risk, b.risk)


@pytest.fixture(scope="module")
def scored(workdir):
    out = workdir / "scores"
    for v in ("baseline", "prime"):
        assert run("eval", "--data", workdir / "data/test.csv", "--checkpoint", workdir / f"ckpt/{v}.ckpt",
                   "--n-boot", 10, "--out", out) == EXIT_OK
    return out


class TestCompare:
    def test_self_comparison(self, scored, capsys):
        f = scored / "prime_test_scores.csv"
        assert run("compare", f, f, "--out", scored / "self") == EXIT_OK
        rows = list(csv.DictReader(open(scored / "self/compare.csv")))
        assert rows and all(float(r["p"]) == 1.0 for r in rows)

    def test_pair(self, scored, capsys):
        assert run("compare", scored / "prime_test_scores.csv", scored / "baseline_test_scores.csv") == EXIT_OK
        out = capsys.readouterr().out
        assert out.splitlines()[1].startswith("c_index")
        assert "auc_1yr" in out

    def test_mismatch_names_id(self, scored, tmp_path):
        lines = (scored / "baseline_test_scores.csv").read_text().splitlines()
        first_id = lines[3].split(",")[0]
        lines[3] = "XYZ" + lines[3][len(first_id):]
        (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
        rc = run("compare", scored / "prime_test_scores.csv", tmp_path / "bad.csv")
        assert rc == EXIT_DATA

    def test_mismatch_message(self, scored, tmp_path, capsys):
        lines = (scored / "baseline_test_scores.csv").read_text().splitlines()
        lines[2], lines[3] = lines[3], lines[2]
        (tmp_path / "swap.csv").write_text("\n".join(lines) + "\n")
        run("compare", scored / "prime_test_scores.csv", tmp_path / "swap.csv")
        expected = (scored / "prime_test_scores.csv").read_text().splitlines()[2].split(",")[0]
        assert repr(expected) in capsys.readouterr().err


class TestSubgroup:
    def test_report(self, scored, capsys):
        rc = run("subgroup", scored / "prime_test_scores.csv", "--reference", scored / "baseline_test_scores.csv",
                 "--n-boot", 10, "--out", scored)
        assert rc == EXIT_OK
        rows = list(csv.DictReader(open(scored / "prime_test_subgroups.csv")))
        assert {r["subgroup"] for r in rows} == {"all", "exclude_lt180d", "change", "no_change", "fatty", "dense"}
        assert any(r["metric"] == "p:c_index_vs_baseline" for r in rows)
        assert "exclude_lt180d" in capsys.readouterr().out

    def test_missing_tags(self, scored, tmp_path):
        lines = (scored / "prime_test_scores.csv").read_text().splitlines()
        header = lines[0].split(",")
        k = header.index("density_level")
        stripped = [",".join("" if j == k and i else v for j, v in enumerate(l.split(",")))
                    for i, l in enumerate(lines)]
        (tmp_path / "untagged_scores.csv").write_text("\n".join(stripped) + "\n")
        rc = run("subgroup", tmp_path / "untagged_scores.csv", "--n-boot", 5, "--out", tmp_path)
        assert rc == EXIT_DATA

    def test_no_transitions(self, scored, tmp_path):
        lines = (scored / "prime_test_scores.csv").read_text().splitlines()
        flat = [lines[0]] + [l.replace(",change,", ",no_change,") for l in lines[1:]]
        (tmp_path / "flat_scores.csv").write_text("\n".join(flat) + "\n")
        assert run("subgroup", tmp_path / "flat_scores.csv", "--n-boot", 5, "--out", tmp_path) == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "flat_subgroups.csv")))
        change = [r for r in rows if r["subgroup"] == "change"]
        assert change and all(r["insufficient"] == "1" for r in change)


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert "synth" in capsys.readouterr().out
