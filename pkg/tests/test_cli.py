import json
import re
from pathlib import Path

import numpy as np
import pytest

from flexdiff import autodiff as ad
from flexdiff import evalbench as eb
from flexdiff.cli import main
from flexdiff.schemes import make_autoreg

TINY = ["--k", "4", "--t", "10", "--channels", "8", "--blocks", "1", "--heads", "2", "--batch-size", "4"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "town-drive", "--count", 6, "--n", 24, "--seed", 1, "--out", d / "town.fdmv") == 0
    assert run("gen-data", "colored-rooms", "--count", 4, "--n", 20, "--seed", 1, "--out", d / "rooms.fdmv") == 0
    assert run("train", "--data", d / "town.fdmv", "--out", d / "m.fdmp", "--steps", 5, *TINY) == 0
    return d


def test_gen_data_outputs(work):
    data = eb.load_dataset(work / "town.fdmv")
    assert data.videos.shape == (6, 24, 2) and data.metadata["seed"] == 1
    snap = json.loads((work / "town.fdmv.run.json").read_text())
    assert snap["command"] == "gen-data" and snap["settings"]["count"] == 6


def test_gen_data_deterministic(work, tmp_path):
    run("gen-data", "town-drive", "--count", 6, "--n", 24, "--seed", 1, "--out", tmp_path / "a.fdmv")
    assert (tmp_path / "a.fdmv").read_bytes() == (work / "town.fdmv").read_bytes()
    assert (tmp_path / "a.fdmv.meta").read_bytes() == (work / "town.fdmv.meta").read_bytes()


def test_usage_errors(tmp_path):
    assert run("gen-data", "town-drive", "--count", 0, "--out", tmp_path / "x") == 1
    assert run("gen-data", "nope", "--out", tmp_path / "x") == 1
    assert run("no-such-command") == 1
    assert run("gen-data", "town-drive", "--out", tmp_path / "x", "--set", "bogus=1") == 1
    assert run("inspect-scheme", "autoreg") == 1


def test_help_exits_zero():
    assert run("--help") == 0


def test_train_outputs(work):
    lines = (work / "m.fdmp.loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 6
    assert (work / "m.fdmp.config").exists()
    assert json.loads((work / "m.fdmp.run.json").read_text())["settings"]["steps"] == 5


def test_train_zero_steps_is_init(work, tmp_path):
    assert run("train", "--data", work / "town.fdmv", "--out", tmp_path / "z.fdmp", "--steps", 0, *TINY) == 0
    from flexdiff import FlexibleDiffusionModel
    from flexdiff.denoiser import Denoiser
    from flexdiff.rng import stream

    loaded = ad.load_params(tmp_path / "z.fdmp")
    cfg = FlexibleDiffusionModel.load(tmp_path / "z.fdmp").denoiser_.config
    model = Denoiser.init(cfg, stream(0, 0))
    for k, v in model.params.items():
        assert loaded["model." + k].tobytes() == v.astype("<f4").tobytes()


def test_train_deterministic_and_resume(work, tmp_path):
    a, b = tmp_path / "a.fdmp", tmp_path / "b.fdmp"
    assert run("train", "--data", work / "town.fdmv", "--out", a, "--steps", 5, *TINY) == 0
    assert a.read_bytes() == (work / "m.fdmp").read_bytes()
    assert run("train", "--data", work / "town.fdmv", "--out", b, "--steps", 3, *TINY) == 0
    assert run("train", "--data", work / "town.fdmv", "--out", b, "--steps", 2, "--resume", *TINY) == 0
    assert a.read_bytes() == b.read_bytes()
    assert Path(str(a) + ".loss.csv").read_text() == Path(str(b) + ".loss.csv").read_text()


def test_resume_without_checkpoint(work, tmp_path):
    assert run("train", "--data", work / "town.fdmv", "--out", tmp_path / "none.fdmp", "--resume", *TINY) == 2


def test_config_precedence(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 4, "seed": 7, "lr": 0.01}))
    out = tmp_path / "p.fdmp"
    assert run("train", "--data", work / "town.fdmv", "--out", out, "--config", cfg,
               "--set", "seed=9", "--lr", "0.002", *TINY) == 0
    s = json.loads(Path(str(out) + ".run.json").read_text())["settings"]
    assert (s["steps"], s["seed"], s["lr"]) == (4, 9, 0.002)


def test_key_value_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\ncount=3\nn=22\n")
    assert run("gen-data", "colored-rooms", "--out", tmp_path / "r.fdmv", "--config", cfg) == 0
    assert eb.load_dataset(tmp_path / "r.fdmv").videos.shape[:2] == (3, 22)


def test_sample_and_evaluate(work):
    out = work / "s.fdmv"
    args = ("sample", "--model", work / "m.fdmp", "--data", work / "town.fdmv", "--scheme", "autoreg",
            "--n-obs", 4, "--start", 4, "--count", 2, "--seed", 3, "--out")
    assert run(*args, out) == 0
    assert run(*args, work / "s2.fdmv") == 0
    assert out.read_bytes() == (work / "s2.fdmv").read_bytes()
    done = eb.load_dataset(out)
    ref = eb.load_dataset(work / "town.fdmv").videos[4:6]
    np.testing.assert_array_equal(done.videos[:, :4], ref[:, :4])
    assert (work / "s.fdmv.metrics.csv").read_text().startswith("video,op,mean_speed\n")
    assert run("evaluate", "--samples", out, "--reference", work / "town.fdmv", "--out", work / "e.csv") == 0
    text = (work / "e.csv").read_text()
    assert text.startswith("metric,value\nn_samples,2\nn_reference,6\nop,")
    assert (work / "e.csv.hist.svg").exists()


def test_evaluate_ground_truth_against_itself(work):
    t = work / "town.fdmv"
    assert run("evaluate", "--samples", t, "--reference", t, "--out", work / "gt.csv") == 0
    vals = dict(line.split(",") for line in (work / "gt.csv").read_text().splitlines()[1:])
    assert float(vals["op"]) == 0 and float(vals["wd"]) == 0 and abs(float(vals["fd"])) < 1e-4


def test_evaluate_rooms(work):
    r = work / "rooms.fdmv"
    assert run("evaluate", "--samples", r, "--reference", r, "--n-obs", 5, "--out", work / "r.csv") == 0
    assert "color_accuracy,1.0" in (work / "r.csv").read_text()


def test_evaluate_shape_mismatch(work):
    assert run("evaluate", "--samples", work / "rooms.fdmv", "--reference", work / "town.fdmv",
               "--out", work / "bad.csv") == 2


def test_sample_with_scheme_json(work):
    path = work / "ar.json"
    path.write_text(make_autoreg(24, 4, 4).to_json())
    assert run("sample", "--model", work / "m.fdmp", "--data", work / "town.fdmv", "--scheme", path,
               "--count", 1, "--out", work / "j.fdmv") == 0


def test_invalid_scheme_json_exit_2(work):
    bad = work / "bad.json"
    bad.write_text(json.dumps({"N": 24, "K": 4, "n_obs": 4, "stages": [{"X": [4, 5], "Y": [20]}]}))
    assert run("sample", "--model", work / "m.fdmp", "--data", work / "town.fdmv", "--scheme", bad,
               "--count", 1, "--out", work / "never.fdmv") == 2
    assert not (work / "never.fdmv").exists()
    assert run("inspect-scheme", bad) == 2
    (work / "garbage.json").write_text("{not json")
    assert run("inspect-scheme", work / "garbage.json") == 2


def test_out_of_range_videos(work):
    assert run("sample", "--model", work / "m.fdmp", "--data", work / "town.fdmv", "--scheme", "autoreg",
               "--n-obs", 4, "--start", 6, "--out", work / "x.fdmv") == 2


def test_poisoned_checkpoint_exit_3(work, tmp_path):
    import shutil

    params = ad.load_params(work / "m.fdmp")
    key = next(k for k in params if k.startswith("model."))
    params[key] = np.full_like(params[key], np.nan)
    bad = tmp_path / "nan.fdmp"
    ad.save_params(bad, params)
    shutil.copy(str(work / "m.fdmp") + ".config", str(bad) + ".config")
    assert run("sample", "--model", bad, "--data", work / "town.fdmv", "--scheme", "autoreg", "--n-obs", 4,
               "--count", 1, "--out", tmp_path / "o.fdmv") == 3
    assert run("train", "--data", work / "town.fdmv", "--out", bad, "--steps", 2, "--resume", *TINY) == 3


def test_optimize_scheme(work):
    out = work / "opt.json"
    args = ("optimize-scheme", "--model", work / "m.fdmp", "--data", work / "town.fdmv", "--n-obs", 4,
            "--videos-per-eval", 2, "--t-grid-size", 2, "--seed", 1)
    assert run(*args, "--out", out) == 0
    assert run(*args, "--out", work / "opt2.json") == 0
    assert out.read_bytes() == (work / "opt2.json").read_bytes()
    assert (work / "opt.json.trace.csv").read_bytes() == (work / "opt2.json.trace.csv").read_bytes()
    assert run("inspect-scheme", out) == 0


def test_inspect_scheme_autoreg_rows(tmp_path):
    svg = tmp_path / "a.svg"
    assert run("inspect-scheme", "autoreg", "--n", 30, "--n-obs", 10, "--k", 7, "--svg", svg) == 0
    rows = set(re.findall(r'y="(\d+)" width="10" height="10" fill="#1f5fbf"', svg.read_text()))
    assert len(rows) == 7


def test_inspect_taskdist(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("inspect-taskdist", "structured", "--samples", 200, "--csv", a, "--svg", tmp_path / "a.svg") == 0
    assert run("inspect-taskdist", "structured", "--samples", 200, "--csv", b) == 0
    assert a.read_bytes() == b.read_bytes()
    counts = [int(line.split(",")[2]) for line in a.read_text().splitlines()[1:]]
    assert sum(counts) == 200


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("FDM_THREADS", "x")
    assert run("inspect-taskdist", "uniform") == 1
    monkeypatch.setenv("FDM_THREADS", "1")
    assert run("inspect-taskdist", "uniform") == 0
