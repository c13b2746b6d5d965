import contextlib
import csv
import io
import json
import os
from pathlib import Path

import numpy as np
import pytest

from sesaseg import cli
from sesaseg.errors import DivergenceError
from sesaseg.metrics import CSV_COLUMNS
from sesaseg.model import LOG_COLUMNS
from sesaseg.volume import LabelVolume, Volume3, load, read_mvol, save

SNAPSHOTS = Path(__file__).parent / "snapshots"
COMMANDS = ["gen-phantom", "dtm", "dpm", "loss-eval", "train", "project", "evaluate",
            "export-slice", "export-mesh", "sweep"]


def run(argv, monkeypatch=None):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = cli.main([str(a) for a in argv])
        except SystemExit as stop:
            code = stop.code
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    code, _, err = run(["gen-phantom", "--dims", 20, "--cases", 3, "--seed", 3, "--out", root])
    assert code == 0, err
    return root


def _case(suite, split):
    manifest = json.loads((suite / "manifest.json").read_text())
    return suite / next(e["case_id"] for e in manifest["cases"] if e["split"] == split)


@pytest.mark.parametrize("command", [None] + COMMANDS)
def test_help_snapshots(command):
    argv = ["--help"] if command is None else [command, "--help"]
    code, text, _ = run(argv)
    assert code == 0
    snap = SNAPSHOTS / f"help_{command or 'main'}.txt"
    if os.environ.get("SESASEG_UPDATE_SNAPSHOTS"):
        snap.parent.mkdir(exist_ok=True)
        snap.write_text(text)
    assert text == snap.read_text()


def test_usage_errors_are_one_line():
    code, _, err = run(["dtm", "--bogus"])
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("error: usage: ")
    assert run([])[0] == 2
    assert run(["sweep", "--preset", "nope", "--suite", "x", "--out", "y"])[0] == 2


def test_error_categories_map_to_exit_codes(tmp_path, suite):
    empty = tmp_path / "empty.mvol"
    save(empty, LabelVolume(np.zeros((4, 4, 4))), "label")
    garbage = tmp_path / "garbage.mvol"
    garbage.write_bytes(b"garbage")
    cases = [
        (["dtm", "--in", empty, "--out", tmp_path / "o.mvol"], "empty-class"),
        (["dtm", "--in", tmp_path / "missing.mvol", "--out", tmp_path / "o.mvol"], "io"),
        (["dtm", "--in", garbage, "--out", tmp_path / "o.mvol"], "bad-header"),
        (["dtm", "--in", _case(suite, "train") / "labels.mvol", "--out", tmp_path / "o.mvol"],
         "invalid-input"),
        (["dtm", "--in", empty, "--beta", 0, "--out", tmp_path / "o.mvol"], "invalid-input"),
        (["gen-phantom", "--dims", 8, "--cases", 1, "--out", tmp_path / "s"], "invalid-input"),
        (["export-mesh", "--out", tmp_path / "m.ply"], "invalid-input"),
    ]
    for argv, category in cases:
        code, _, err = run(argv)
        assert err.startswith(f"error: {category}: ") and err.count("\n") == 1, (argv, err)
        assert code == cli.EXIT_CODES[category], (argv, code)
    assert len(set(cli.EXIT_CODES.values())) == len(cli.EXIT_CODES)


def test_dtm_and_dpm_outputs(tmp_path, suite):
    case = _case(suite, "train")
    assert run(["dtm", "--in", case / "la.mvol", "--out", tmp_path / "d.mvol"])[0] == 0
    header, phi = read_mvol(tmp_path / "d.mvol")
    assert header.kind == "distance"
    la = load(case / "la.mvol").data
    assert (phi.data[la == 0] > 0).all() and (phi.data[la > 0] <= 0).all()
    assert run(["dpm", "--in", case / "labels.mvol", "--variant", "expit-norm",
                "--out", tmp_path / "dpm"])[0] == 0
    total = sum(load(tmp_path / "dpm" / f).data
                for f in ("p_normal.mvol", "p_scar.mvol", "p_background.mvol"))
    assert np.allclose(total, 1.0, atol=1e-12)


def test_out_dir_environment_variable(tmp_path, suite, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    case = _case(suite, "train")
    assert run(["dtm", "--in", case / "la.mvol", "--out", "rel/d.mvol"])[0] == 0
    assert (tmp_path / "rel" / "d.mvol").is_file()


def test_train_evaluate_pipeline(tmp_path, suite):
    code, out, err = run(["train", "--suite", suite, "--kind", "field", "--iters", 5,
                          "--out", tmp_path / "run"])
    assert code == 0, err
    summary = json.loads(out)
    with open(tmp_path / "run" / "trainlog.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == summary["iterations"] == 5
    config = json.loads((tmp_path / "run" / "config.json").read_text())
    assert config["arm"] == "sesa" and config["iterations"] == 5
    test_case = _case(suite, "test")
    pred = tmp_path / "run" / "predictions" / test_case.name
    assert sorted(p.name for p in pred.iterdir()) == ["la_prob.mvol", "p_normal.mvol",
                                                        "p_scar.mvol"]
    # the field model starts at 0.5 everywhere; a few steps are not enough for an LA,
    # so evaluation falls back to an empty prediction rather than failing
    assert run(["evaluate", "--pred", tmp_path / "run", "--gt", suite,
                "--out", tmp_path / "m.csv"])[0] == 0
    with open(tmp_path / "m.csv") as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == CSV_COLUMNS and len(table) == 2
    assert run(["loss-eval", "--pred-la", pred / "la_prob.mvol", "--pred-dpm", pred,
                "--gt", test_case, "--mean", "--out", tmp_path / "le.json"])[0] == 0
    report = json.loads((tmp_path / "le.json").read_text())
    assert report["reduction"] == "mean" and np.isfinite(report["terms"]["total"])


def test_evaluate_otsu_baseline(tmp_path, suite):
    assert run(["evaluate", "--otsu", "--gt", suite, "--split", "all",
                "--out", tmp_path / "o.csv"])[0] == 0
    with open(tmp_path / "o.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert all(float(r["dice_la"]) == 1.0 for r in rows)
    assert run(["evaluate", "--gt", suite, "--out", tmp_path / "x.csv"])[0] == 4


def test_divergence_saves_partial_run(tmp_path, suite, monkeypatch):
    def boom(model, cases, config, log=None, progress=None):
        log.append(**{c: 0 for c in LOG_COLUMNS})
        raise DivergenceError("loss is not finite at iteration 1", iteration=1, checkpoint=model)

    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run(["train", "--suite", suite, "--kind", "field", "--iters", 5,
                        "--out", tmp_path / "run"])
    assert code == 7 and err.startswith("error: divergence: ")
    assert (tmp_path / "run" / "checkpoint").is_dir()
    assert len((tmp_path / "run" / "trainlog.csv").read_text().splitlines()) == 2


def test_project_export_slice_and_mesh(tmp_path, suite):
    case = _case(suite, "train")
    assert run(["project", "--scar", case / "labels.mvol", "--surface-from", case / "la.mvol",
                "--out", tmp_path / "p.ply"])[0] == 0
    head = (tmp_path / "p.ply").read_text().splitlines()
    assert head[0] == "ply" and head[2].startswith("element vertex ")
    assert run(["export-slice", "--in", case / "intensity.mvol", "--axis", "x", "--index", 3,
                "--out", tmp_path / "s.pgm"])[0] == 0
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n20 20\n255\n")
    assert run(["export-slice", "--in", case / "intensity.mvol", "--index", 99,
                "--out", tmp_path / "t.pgm"])[0] == 4
    assert run(["export-mesh", "--gt", case, "--out", tmp_path / "g.ply"])[0] == 0


def test_export_mesh_from_predictions(tmp_path):
    la = np.zeros((6, 6, 6))
    la[1:5, 1:5, 1:5] = 0.9
    d = tmp_path / "pred"
    d.mkdir()
    save(d / "la_prob.mvol", Volume3(la), "probability")
    save(d / "p_normal.mvol", Volume3(np.full(la.shape, 0.6)), "probability")
    save(d / "p_scar.mvol", Volume3(np.full(la.shape, 0.4)), "probability")
    assert run(["export-mesh", "--pred", d, "--out", tmp_path / "m.ply"])[0] == 0
    text = (tmp_path / "m.ply").read_text()
    assert "element vertex 56" in text and " 255 0 0" not in text
    save(d / "la_prob.mvol", Volume3(la * 0.1), "probability")
    assert run(["export-mesh", "--pred", d, "--out", tmp_path / "n.ply"])[0] == 3


def test_sweep_dry_run_lists_grid(tmp_path):
    code, out, _ = run(["sweep", "--preset", "dpm_variant_sweep", "--suite", tmp_path,
                        "--seeds", "0,1", "--dry-run", "--out", tmp_path / "sw"])
    assert code == 0
    runs = json.loads(out)["runs"]
    assert len(runs) == 4 * 2 * 2
    assert len({r["tag"] for r in runs}) == len(runs)
    assert not (tmp_path / "sw").exists()


def test_sweep_writes_tables(tmp_path, suite):
    code, _, err = run(["sweep", "--preset", "beta_sweep", "--suite", suite, "--kind", "field",
                        "--iters", 2, "--seeds", "0", "--out", tmp_path / "sw"])
    assert code == 0, err
    with open(tmp_path / "sw" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["beta"] for r in rows] == ["0.5", "1.0", "2.0"]
    for beta in ("0.5", "1.0", "2.0"):
        assert (tmp_path / "sw" / f"beta_{beta}" / "metrics.csv").is_file()
    summary = json.loads((tmp_path / "sw" / "summary.json").read_text())
    assert len(summary["runs"]) == 3


def test_module_entry_point():
    import runpy
    import sys

    argv = sys.argv
    sys.argv = ["sesaseg", "--version"]
    try:
        with pytest.raises(SystemExit) as stop, contextlib.redirect_stdout(io.StringIO()):
            runpy.run_module("sesaseg", run_name="__main__")
    finally:
        sys.argv = argv
    assert stop.value.code == 0
