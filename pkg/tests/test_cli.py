"""End-to-end CLI pipeline: exit codes, artifacts, reruns byte-identical.

Runs main() in process; stdout/stderr are captured with redirect_* because
the suite runs with capture disabled.
"""

import contextlib
import io

import numpy as np
import pytest

import gapa.cli as cli
from gapa.cli import config_digest, load_config, main, parse_spec
from gapa.backbone import Activation
from gapa.errors import ConfigurationError
from gapa.metrics import load_report

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One trained backbone plus free and variational fits, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "root": root,
        "data": str(root / "toy.csv"),
        "eval_data": str(root / "toy_eval.csv"),
        "net": str(root / "net.json"),
        "free": str(root / "free.gapa.json"),
        "var": str(root / "var.gapa.json"),
    }
    train_cfg = root / "train.cfg"
    train_cfg.write_text(
        "# small settings so the pipeline stays fast\n"
        "spec=1-6-1:tanh\n"
        "train_epochs=300\n"
        "train_learning_rate=0.02\n"
        "train_batch_size=32\n"
        "train_fraction=0.8\n"
        "seed=0\n"
    )
    fit_cfg = root / "fit.cfg"
    fit_cfg.write_text("inducing=6\nepochs=3\nbatch_size=32\nseed=0\n")
    paths["train_cfg"] = str(train_cfg)
    paths["fit_cfg"] = str(fit_cfg)

    code, out, err = run("gen-toy", "--n", "80", "--seed", "1", "--out", paths["data"])
    assert code == 0, err
    code, out, err = run("gen-toy", "--n", "40", "--seed", "2", "--out", paths["eval_data"])
    assert code == 0, err
    code, out, err = run(
        "train-backbone",
        "--data", paths["data"],
        "--target", "y",
        "--config", paths["train_cfg"],
        "--out", paths["net"],
    )
    assert code == 0, err
    assert "RMSE" in out
    code, out, err = run(
        "fit",
        "--net", paths["net"],
        "--data", paths["data"],
        "--mode", "free",
        "--config", paths["fit_cfg"],
        "--out", paths["free"],
    )
    assert code == 0, err
    assert "theta1=" in out
    code, out, err = run(
        "fit",
        "--net", paths["net"],
        "--data", paths["data"],
        "--mode", "variational",
        "--config", paths["fit_cfg"],
        "--out", paths["var"],
    )
    assert code == 0, err
    return paths


def test_gen_toy_output_and_rerun(pipeline, tmp_path):
    lines = open(pipeline["data"]).read().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "x,y"
    assert len(lines) == 82
    again = tmp_path / "again.csv"
    code, _, _ = run("gen-toy", "--n", "80", "--seed", "1", "--out", str(again))
    assert code == 0
    assert again.read_bytes() == open(pipeline["data"], "rb").read()


def test_gen_toy_rejects_tiny_n(tmp_path):
    code, _, err = run("gen-toy", "--n", "5", "--out", str(tmp_path / "x.csv"))
    assert code == 2
    assert "error:" in err


def test_train_backbone_bad_spec(pipeline, tmp_path):
    code, _, err = run(
        "train-backbone",
        "--data", pipeline["data"],
        "--target", "y",
        "--spec", "1",
        "--out", str(tmp_path / "net.json"),
    )
    assert code == 2
    assert "spec" in err


def test_train_backbone_missing_file(tmp_path):
    code, _, err = run(
        "train-backbone",
        "--data", str(tmp_path / "nope.csv"),
        "--target", "y",
        "--spec", "1-4-1",
        "--out", str(tmp_path / "net.json"),
    )
    assert code == 2


def test_fit_free_rerun_is_byte_identical(pipeline, tmp_path):
    again = tmp_path / "again.gapa.json"
    code, _, err = run(
        "fit",
        "--net", pipeline["net"],
        "--data", pipeline["data"],
        "--mode", "free",
        "--config", pipeline["fit_cfg"],
        "--out", str(again),
    )
    assert code == 0, err
    assert again.read_bytes() == open(pipeline["free"], "rb").read()


def test_fit_variational_writes_trainlog(pipeline):
    log_lines = open(pipeline["var"] + ".trainlog").read().splitlines()
    assert len(log_lines) == 4
    assert log_lines[0].startswith("epoch=0 nll=")


def test_fit_rejects_unknown_mode(pipeline, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(
            "fit",
            "--net", pipeline["net"],
            "--data", pipeline["data"],
            "--mode", "bogus",
            "--out", str(tmp_path / "x.json"),
        )
    assert exc.value.code == 2


def test_fit_negative_noise_is_config_error(pipeline, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("noise=-1.0\ninducing=6\n")
    code, _, err = run(
        "fit",
        "--net", pipeline["net"],
        "--data", pipeline["data"],
        "--mode", "free",
        "--config", str(cfg),
        "--out", str(tmp_path / "x.json"),
    )
    assert code == 2
    assert "error:" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_divergence_is_numerical_error(pipeline, tmp_path):
    cfg = tmp_path / "explode.cfg"
    cfg.write_text("inducing=6\nepochs=2\nlearning_rate=1e10\nbatch_size=32\n")
    code, _, err = run(
        "fit",
        "--net", pipeline["net"],
        "--data", pipeline["data"],
        "--mode", "variational",
        "--config", str(cfg),
        "--out", str(tmp_path / "x.json"),
    )
    assert code == 3
    assert "epoch" in err


def test_evaluate_writes_report_and_figure(pipeline):
    out = str(pipeline["root"] / "report.json")
    code, text, err = run(
        "evaluate",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--data", pipeline["eval_data"],
        "--out", out,
    )
    assert code == 0, err
    assert "nll=" in text and "cqm=" in text
    report = load_report(out)
    assert report.n_points == 40
    assert np.isfinite(report.nll) and np.isfinite(report.crps)
    png = pipeline["root"] / "report.png"
    assert png.read_bytes()[:8] == PNG_MAGIC


def test_predict_adds_four_columns(pipeline, tmp_path):
    out = tmp_path / "preds.csv"
    code, text, err = run(
        "predict",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--data", pipeline["eval_data"],
        "--out", str(out),
    )
    assert code == 0, err
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config=")
    assert lines[1] == "x,mean,variance,mean_std_units,variance_std_units"
    assert len(lines) == 42
    variances = [float(line.split(",")[2]) for line in lines[2:]]
    assert min(variances) > 0.0
    again = tmp_path / "preds2.csv"
    code, _, _ = run(
        "predict",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--data", pipeline["eval_data"],
        "--out", str(again),
    )
    assert code == 0
    assert again.read_bytes() == out.read_bytes()


def test_predict_accepts_target_free_input(pipeline, tmp_path):
    src = tmp_path / "features_only.csv"
    src.write_text("x\n-2.0\n-1.5\n1.5\n2.0\n")
    out = tmp_path / "preds.csv"
    code, _, err = run(
        "predict",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--data", str(src),
        "--out", str(out),
    )
    assert code == 0, err
    assert len(out.read_text().splitlines()) == 6


def test_plotdata_band_ordering_and_figure(pipeline, tmp_path):
    out = tmp_path / "band.csv"
    code, _, err = run(
        "plotdata",
        "--net", pipeline["net"],
        "--gapa", pipeline["var"],
        "--grid-min", "-3", "--grid-max", "3", "--grid-n", "25",
        "--out", str(out),
    )
    assert code == 0, err
    rows = [list(map(float, line.split(","))) for line in out.read_text().splitlines()[2:]]
    assert len(rows) == 25
    for _, mean, lower, upper in rows:
        assert lower < mean < upper
    assert (tmp_path / "band.png").read_bytes()[:8] == PNG_MAGIC


def test_plotdata_rejects_bad_grid(pipeline, tmp_path):
    code, _, err = run(
        "plotdata",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--grid-min", "2", "--grid-max", "-2", "--grid-n", "25",
        "--out", str(tmp_path / "x.csv"),
    )
    assert code == 2
    code, _, err = run(
        "plotdata",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--grid-min", "-2", "--grid-max", "2", "--grid-n", "1",
        "--out", str(tmp_path / "x.csv"),
    )
    assert code == 2


def test_plotdata_requires_one_feature(tmp_path):
    data = tmp_path / "two.csv"
    lines = ["a,b,y"]
    rng = np.random.default_rng(0)
    for _ in range(16):
        u, v = (float(t) for t in rng.standard_normal(2))
        lines.append(f"{u!r},{v!r},{u + v!r}")
    data.write_text("\n".join(lines) + "\n")
    cfg = tmp_path / "cfg"
    cfg.write_text("spec=2-3-1:tanh\ntrain_epochs=5\ntrain_fraction=0.75\ninducing=3\n")
    net = tmp_path / "net.json"
    code, _, err = run(
        "train-backbone",
        "--data", str(data), "--target", "y",
        "--config", str(cfg), "--out", str(net),
    )
    assert code == 0, err
    gapa_path = tmp_path / "g.json"
    code, _, err = run(
        "fit",
        "--net", str(net), "--data", str(data),
        "--mode", "free", "--config", str(cfg), "--out", str(gapa_path),
    )
    assert code == 0, err
    code, _, err = run(
        "plotdata",
        "--net", str(net), "--gapa", str(gapa_path),
        "--grid-min", "-1", "--grid-max", "1", "--grid-n", "5",
        "--out", str(tmp_path / "band.csv"),
    )
    assert code == 2
    assert "1-D" in err


def test_grad_check_passes_on_fitted_model(pipeline):
    code, out, err = run(
        "grad-check",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--data", pipeline["data"],
    )
    assert code == 0, err
    assert "PASS" in out


def test_grad_check_rejects_zero_h(pipeline):
    code, _, err = run(
        "grad-check",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--data", pipeline["data"],
        "--h", "0",
    )
    assert code == 2


def test_grad_check_failure_exit_code(pipeline, monkeypatch):
    monkeypatch.setattr(cli, "grad_check", lambda *a, **k: 0.5)
    code, out, _ = run(
        "grad-check",
        "--net", pipeline["net"],
        "--gapa", pipeline["free"],
        "--data", pipeline["data"],
    )
    assert code == 1
    assert "FAIL" in out


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 2


def test_load_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None)
    assert cfg["inducing"] == 32
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\nseed = 7\nnoise=1e-3\nmode=diag\n")
    cfg = load_config(str(path))
    assert cfg["seed"] == 7
    assert cfg["noise"] == 1e-3
    assert cfg["mode"] == "diag"


def test_load_config_bad_lines(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("nonsense\n")
    with pytest.raises(ConfigurationError):
        load_config(str(path))
    path.write_text("unknown_key=1\n")
    with pytest.raises(ConfigurationError, match="unknown_key"):
        load_config(str(path))
    path.write_text("seed=abc\n")
    with pytest.raises(ConfigurationError, match="seed"):
        load_config(str(path))


def test_config_digest_is_stable_sha256():
    cfg = load_config(None)
    digest = config_digest(cfg)
    assert len(digest) == 64 and int(digest, 16) >= 0
    assert config_digest(dict(cfg)) == digest
    changed = dict(cfg)
    changed["seed"] = 1
    assert config_digest(changed) != digest


def test_parse_spec_shapes():
    specs = parse_spec("1-4-1:relu")
    assert [s.out_dim for s in specs] == [4, 1]
    assert specs[0].activation is Activation.RELU
    assert specs[1].activation is Activation.IDENTITY
    assert parse_spec("2-8-8-1")[0].activation is Activation.TANH
    for bad in ("", "1", "1-0-1", "1-x-1", "1-4-1:swish"):
        with pytest.raises(ConfigurationError):
            parse_spec(bad)
