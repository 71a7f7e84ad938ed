import csv
import io

import numpy as np
import pytest

from tsca import cli, formats
from tsca.verify import Check

SMALL = "layers=2\nd_model=16\nheads=2\nffn_dim=32\nkernel_size=5\nvocab_size=8\nl_att=12\n"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL)
    return str(path)


def feature_file(tmp_path, name, frames, seed=0, d_feat=8):
    path = tmp_path / name
    formats.save_features(path, cli.synthetic_features(frames, d_feat, seed))
    return str(path)


# -- gen-mask ---------------------------------------------------------------------

def test_gen_mask_p1_grid(capsys):
    code, out, _ = run(capsys, "gen-mask", "--size", "6", "--l", "2", "--c", "2", "--r", "1", "--p", "1")
    assert code == 0
    rows = out.splitlines()
    assert len(rows) == 6 and all(len(r) == 6 and set(r) <= {"0", "1"} for r in rows)
    # the first chunk sees itself plus one lookahead frame
    assert rows[0] == "111000"


def test_gen_mask_seeded_output_is_stable(capsys, tmp_path):
    args = ["gen-mask", "--size", "40", "--l", "6", "--c", "4", "--r", "2", "--p", "0.5", "--seed", "3"]
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run(capsys, *args, "--out", str(a))[0] == 0
    assert run(capsys, *args, "--out", str(b))[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_mask_pgm(capsys, tmp_path):
    out = tmp_path / "m.pgm"
    assert run(capsys, "gen-mask", "--size", "8", "--l", "4", "--c", "2", "--format", "pgm", "--out", str(out))[0] == 0
    assert out.read_bytes().startswith(b"P")


def test_gen_mask_invalid_exits_2(capsys):
    code, _, err = run(capsys, "gen-mask", "--size", "8", "--l", "4", "--c", "2", "--r", "5")
    assert code == 2 and err.startswith("error:")


# -- simulate ---------------------------------------------------------------------

def test_simulate_prints_growing_transcript(capsys, tmp_path, small_cfg):
    feats = feature_file(tmp_path, "a.tscf", 95)
    log, report = tmp_path / "a.log", tmp_path / "a.report"
    code, out, _ = run(capsys, "simulate", "--features", feats, "--config", small_cfg, "--c", "10", "--r", "6",
                       "--log", str(log), "--report", str(report), "--sim-compute-ms", "0")
    assert code == 0
    assert len(out.splitlines()) == 95 // 10 + 1
    assert log.read_text() and "upl" in report.read_text().lower()


def test_simulate_zero_and_nonzero_lookahead(capsys, tmp_path, small_cfg):
    feats = feature_file(tmp_path, "a.tscf", 80)
    for r in ("0", "6"):
        log = tmp_path / f"r{r}.log"
        assert run(capsys, "simulate", "--features", feats, "--config", small_cfg, "--c", "10", "--r", r,
                   "--log", str(log), "--sim-compute-ms", "0")[0] == 0
        assert log.read_text()


def test_simulate_batch_logs_equal_solo_runs(capsys, tmp_path, small_cfg):
    files = [feature_file(tmp_path, f"f{i}.tscf", 40 + 13 * i, seed=i) for i in range(8)]
    common = ["--config", small_cfg, "--c", "10", "--r", "6", "--sim-compute-ms", "1"]
    assert run(capsys, "simulate", "--features", *files, "--batch", "8",
               "--log", str(tmp_path / "batch.log"), *common)[0] == 0
    for i, f in enumerate(files):
        solo = tmp_path / f"solo{i}.log"
        assert run(capsys, "simulate", "--features", f, "--log", str(solo), *common)[0] == 0
        assert (tmp_path / f"batch.{i}.log").read_text() == solo.read_text()


def test_simulate_empty_features(capsys, tmp_path, small_cfg):
    path = tmp_path / "empty.tscf"
    formats.save_features(path, np.zeros((0, 8), np.float32))
    code, out, _ = run(capsys, "simulate", "--features", str(path), "--config", small_cfg)
    assert code == 0 and out.strip() == ""


def test_simulate_bad_inputs_exit_2(capsys, tmp_path, small_cfg):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense=1\n")
    feats = feature_file(tmp_path, "a.tscf", 20)
    assert run(capsys, "simulate", "--features", feats, "--config", str(bad))[0] == 2
    assert run(capsys, "simulate", "--features", str(tmp_path / "missing.tscf"), "--config", small_cfg)[0] == 2
    assert run(capsys, "simulate", "--config", small_cfg)[0] == 2


def test_simulate_with_token_table(capsys, tmp_path, small_cfg):
    tokens = tmp_path / "tokens.txt"
    formats.save_tokens(tokens, ["<blank>"] + list("abcdefg"))
    feats = feature_file(tmp_path, "a.tscf", 30)
    code, out, _ = run(capsys, "simulate", "--features", feats, "--config", small_cfg, "--tokens", str(tokens))
    assert code == 0
    assert set(out.replace("\n", "").replace("[", "").replace("]", "")) <= set("abcdefg")


# -- verify -----------------------------------------------------------------------

@pytest.mark.parametrize("suite,seeds", [("masks", None), ("attention", 2), ("conv", None), ("e2e", 2),
                                         ("grad", 1), ("faults", 1)])
def test_verify_suites_pass(capsys, suite, seeds):
    argv = ["verify", "--suite", suite] + ([] if seeds is None else ["--seeds", str(seeds)])
    code, out, _ = run(capsys, *argv)
    assert code == 0, out
    assert out.splitlines()[-1].endswith("failed=0")


def test_verify_failure_exits_3(capsys, monkeypatch):
    monkeypatch.setitem(cli.SUITES, "masks", lambda **_: [Check("broken", False, "forced")])
    code, out, _ = run(capsys, "verify", "--suite", "masks")
    assert code == 3 and "failed=1" in out


# -- bootstrap --------------------------------------------------------------------

def write_scores(path, rows):
    path.write_text("".join(f"{e}\t{w}\n" for e, w in rows))
    return str(path)


def test_bootstrap_exhaustive_output(capsys, tmp_path):
    a = write_scores(tmp_path / "a.tsv", [(3, 10), (2, 10)])
    b = write_scores(tmp_path / "b.tsv", [(1, 10), (2, 10)])
    code, out, _ = run(capsys, "bootstrap", "--scores", a, b, "--exhaustive")
    assert code == 0 and out.strip() == "rwerr=0.4 lo=0.06 hi=0.626667"


def test_bootstrap_identical_and_mismatched(capsys, tmp_path):
    a = write_scores(tmp_path / "a.tsv", [(3, 10), (2, 12), (5, 9)])
    code, out, _ = run(capsys, "bootstrap", "--scores", a, a, "--B", "200")
    assert code == 0 and out.strip() == "rwerr=0 lo=0 hi=0"
    short = write_scores(tmp_path / "s.tsv", [(3, 10)])
    assert run(capsys, "bootstrap", "--scores", a, short)[0] == 2
    zero = write_scores(tmp_path / "z.tsv", [(0, 10)])
    assert run(capsys, "bootstrap", "--scores", zero, zero)[0] == 2


# -- bench ------------------------------------------------------------------------

def bench_csv(capsys, *argv):
    code, out, _ = run(capsys, "bench", *argv)
    assert code == 0
    return list(csv.DictReader(io.StringIO(out)))


def test_bench_window_parity(capsys, small_cfg):
    rows = bench_csv(capsys, "--configs", "10:6,16:0", "--frames", "160", "--config", small_cfg,
                     "--l-att", "12")
    assert [(int(r["c"]), int(r["r"])) for r in rows] == [(10, 6), (16, 0)]
    assert rows[0]["window"] == rows[1]["window"] == "28"
    for r in rows:
        assert float(r["rtf"]) == pytest.approx(float(r["mean_ms"]) / (int(r["c"]) * 10), rel=1e-3, abs=1e-6)


def test_bench_single_config(capsys, small_cfg, tmp_path):
    out = tmp_path / "bench.csv"
    assert run(capsys, "bench", "--configs", "8:2", "--frames", "50", "--config", small_cfg, "--out", str(out))[0] == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1 and rows[0]["steps"] == str(-(-(50 + 2) // 8))


# -- make-features / init-weights ----------------------------------------------------

def test_make_features_and_init_weights(capsys, tmp_path, small_cfg):
    fpath, wpath = tmp_path / "x.tscf", tmp_path / "w.tscw"
    assert run(capsys, "make-features", "--out", str(fpath), "--frames", "30", "--d-feat", "8")[0] == 0
    feats, ms = formats.load_features(fpath)
    assert feats.shape == (30, 8) and ms == 10.0
    cfg = tmp_path / "w.cfg"
    cfg.write_text(SMALL + "d_feat=8\n")
    assert run(capsys, "init-weights", "--out", str(wpath), "--config", str(cfg), "--seed", "5")[0] == 0
    code, out, _ = run(capsys, "simulate", "--features", str(fpath), "--config", str(cfg), "--weights", str(wpath))
    assert code == 0 and out
