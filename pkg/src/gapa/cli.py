"""Command-line pipeline driver.

Subcommands cover the whole workflow: toy-data generation, backbone
training, GAPA fitting with free or variational calibration, evaluation,
per-row prediction, and 1-D uncertainty-band export.  Report-style
commands (evaluate, plotdata) also render a matplotlib figure next to
their delimited output.

Configuration is a flat ``key=value`` text file; command-line flags
override file values.  Every artifact embeds a digest of the effective
configuration, and rerunning a command with identical inputs and seed
reproduces byte-identical numerical payloads.

Exit codes: 0 success, 1 check failure, 2 usage/configuration error,
3 numerical/training error.  The environment variable GAPA_THREADS caps
worker parallelism during GAPA fitting.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from .backbone import (
    Activation,
    LayerSpec,
    NetworkFile,
    TrainConfig,
    forward_batch,
    load_network,
    save_network,
    train_backbone,
)
from .calibrate import (
    VariationalConfig,
    build_variational_problem,
    fit_free,
    fit_variational,
    grad_check,
)
from .dataio import (
    Dataset,
    apply_standardizer,
    fisher_yates_permutation,
    fit_standardizer,
    invert_target,
    load_csv,
    make_toy_gap,
    save_csv,
)
from .errors import (
    ConfigurationError,
    DomainError,
    GapaError,
    IngestionError,
    NotPositiveDefiniteError,
    NumericalConsistencyError,
    PersistenceError,
    ShapeError,
    TrainingError,
)
from .figures import coverage_figure, uncertainty_band_figure
from .gpact import (
    GapaModel,
    GapaState,
    VariationalCalibration,
    fit_gapa_layer,
    load_gapa,
    save_gapa,
)
from .metrics import coverage_curve, evaluate, save_report
from .propagate import gapa_forward, predict_rows

__all__ = ["main"]

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

GRAD_CHECK_TOL = 1e-4

_INT_KEYS = {
    "seed",
    "train_epochs",
    "train_batch_size",
    "inducing",
    "subsample",
    "epochs",
    "batch_size",
    "grid",
}
_FLOAT_KEYS = {"train_learning_rate", "train_fraction", "noise", "learning_rate"}
_STR_KEYS = {"spec", "mode", "calibration"}

CONFIG_DEFAULTS: dict = {
    "seed": 0,
    "spec": "",
    "train_epochs": 2000,
    "train_learning_rate": 0.01,
    "train_batch_size": 64,
    "train_fraction": 0.9,
    "inducing": 32,
    "subsample": 2048,
    "noise": 1e-6,
    "mode": "full",
    "calibration": "free",
    "epochs": 200,
    "learning_rate": 0.01,
    "batch_size": 64,
    "grid": 99,
}


def load_config(path: str | None) -> dict:
    """Defaults overlaid with the ``key=value`` lines of a config file."""
    cfg = dict(CONFIG_DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    for number, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigurationError(f"{path}:{number}: expected key=value, got {text!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in cfg:
            raise ConfigurationError(f"{path}:{number}: unknown config key {key!r}")
        try:
            if key in _INT_KEYS:
                cfg[key] = int(value)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(value)
            else:
                cfg[key] = value
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{number}: bad value for {key!r}: {value!r}") from exc
    return cfg


def config_digest(cfg: dict) -> str:
    """sha256 over the sorted canonical key=value lines."""

    def canonical(v) -> str:
        if isinstance(v, float):
            return repr(v)
        return str(v)

    text = "\n".join(f"{k}={canonical(v)}" for k, v in sorted(cfg.items()))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_spec(text: str):
    """Layer spec string, e.g. ``1-32-32-1:tanh`` (activation optional)."""
    if not text:
        raise ConfigurationError("no layer spec given (flag --spec or config key spec)")
    body, _, act_name = text.partition(":")
    act_name = act_name.strip() or "tanh"
    try:
        activation = Activation(act_name)
    except ValueError:
        raise ConfigurationError(f"unknown activation {act_name!r} in spec {text!r}") from None
    try:
        dims = [int(part) for part in body.split("-")]
    except ValueError:
        raise ConfigurationError(f"bad layer spec {text!r}") from None
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigurationError(f"layer spec needs >= 2 positive dims, got {text!r}")
    specs = []
    for i in range(len(dims) - 1):
        act = activation if i < len(dims) - 2 else Activation.IDENTITY
        specs.append(LayerSpec(in_dim=dims[i], out_dim=dims[i + 1], activation=act))
    return tuple(specs)


def _figure_path(out: str) -> str:
    return os.path.splitext(out)[0] + ".png"


def _write_table(path: str, header, rows, digest: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config={digest}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _load_model(net_path: str, gapa_path: str):
    nf = load_network(net_path)
    gf = load_gapa(gapa_path)
    return nf, GapaModel(network=nf.network, state=gf.state)


def _target_name(nf: NetworkFile) -> str:
    return nf.target_name or "y"


def cmd_gen_toy(args) -> int:
    dataset = make_toy_gap(args.n, args.seed)
    digest = config_digest({"command": "gen-toy", "n": args.n, "seed": args.seed})
    save_csv(dataset, args.out, comments=(f"config={digest}",))
    print(f"wrote {args.out} ({dataset.n_rows} rows)")
    return EXIT_OK


def cmd_train_backbone(args) -> int:
    cfg = load_config(args.config)
    if args.spec:
        cfg["spec"] = args.spec
    dataset = load_csv(args.data, args.target)
    specs = parse_spec(cfg["spec"])
    if specs[0].in_dim != dataset.n_features:
        raise ConfigurationError(
            f"spec input dim {specs[0].in_dim} does not match the "
            f"{dataset.n_features}-feature dataset"
        )
    fraction = cfg["train_fraction"]
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {fraction}")
    n = dataset.n_rows
    n_train = int(np.floor(fraction * n))
    if n_train < 1 or n_train >= n:
        raise ConfigurationError(f"train_fraction {fraction} leaves an empty partition of {n} rows")
    order = fisher_yates_permutation(n, cfg["seed"])
    train = dataset.take(order[:n_train])
    val = dataset.take(order[n_train:])

    standardizer = fit_standardizer(train)
    result = train_backbone(
        apply_standardizer(standardizer, train),
        specs,
        TrainConfig(
            epochs=cfg["train_epochs"],
            learning_rate=cfg["train_learning_rate"],
            batch_size=cfg["train_batch_size"],
            seed=cfg["seed"],
        ),
    )

    def rmse(ds: Dataset) -> float:
        std = apply_standardizer(standardizer, ds)
        _, posts = forward_batch(result.network, std.features)
        mean, _ = invert_target(standardizer, posts[-1][:, 0], np.zeros(ds.n_rows))
        return float(np.sqrt(np.mean((mean - ds.targets) ** 2)))

    digest = config_digest({**cfg, "command": "train-backbone", "target": args.target})
    save_network(
        result.network,
        args.out,
        standardizer=standardizer,
        feature_columns=dataset.column_names,
        target_name=dataset.target_name,
        config_digest=digest,
    )
    print(f"train RMSE {rmse(train):.6f}  val RMSE {rmse(val):.6f} (original units)")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg["calibration"] = args.mode
    nf = load_network(args.net)
    dataset = load_csv(args.data, _target_name(nf))
    if nf.feature_columns is not None and dataset.column_names != nf.feature_columns:
        raise ConfigurationError(
            f"data columns {dataset.column_names} do not match the network's "
            f"training columns {nf.feature_columns}"
        )
    model_space = (
        apply_standardizer(nf.standardizer, dataset) if nf.standardizer is not None else dataset
    )
    layer = fit_gapa_layer(
        nf.network,
        model_space,
        m=cfg["inducing"],
        subsample=cfg["subsample"],
        noise=cfg["noise"],
        seed=cfg["seed"],
    )
    mode = cfg["mode"]
    digest = config_digest({**cfg, "command": "fit"})
    uncalibrated = GapaModel(network=nf.network, state=GapaState(layer=layer, propagation_mode=mode))

    if cfg["calibration"] == "free":
        result = fit_free(uncalibrated, dataset, standardizer=nf.standardizer)
        state = GapaState(layer=layer, calibration=result.calibration, propagation_mode=mode)
        save_gapa(state, args.out, config_digest=digest)
        print(
            f"free calibration theta1={result.calibration.theta1!r} "
            f"theta2={result.calibration.theta2!r} nll={result.nll.mean:.6f}"
        )
        if result.warning:
            print(f"warning: {result.warning}")
    elif cfg["calibration"] == "variational":
        vconfig = VariationalConfig(
            epochs=cfg["epochs"],
            learning_rate=cfg["learning_rate"],
            batch_size=cfg["batch_size"],
            seed=cfg["seed"],
        )
        result = fit_variational(uncalibrated, dataset, vconfig, standardizer=nf.standardizer)
        state = GapaState(
            layer=result.layer, calibration=VariationalCalibration(), propagation_mode=mode
        )
        save_gapa(state, args.out, config_digest=digest)
        log_path = args.out + ".trainlog"
        result.log.write(log_path)
        print(
            f"variational calibration nll {result.log.nll[0]:.6f} -> {result.log.nll[-1]:.6f} "
            f"over {vconfig.epochs} epochs"
        )
        print(f"train log: {log_path}")
    else:
        raise ConfigurationError(f"unknown calibration kind {cfg['calibration']!r}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    nf, model = _load_model(args.net, args.gapa)
    dataset = load_csv(args.data, _target_name(nf))
    report = evaluate(model, dataset, nf.standardizer, grid=cfg["grid"])
    digest = config_digest({**cfg, "command": "evaluate"})
    save_report(report, args.out, config_digest=digest)

    preds = predict_rows(
        model.network,
        model.layer,
        model.state.calibration,
        dataset.features,
        model.state.propagation_mode,
        standardizer=nf.standardizer,
    )
    alphas, empirical = coverage_curve(preds, dataset.targets, cfg["grid"])
    figure = coverage_figure(alphas, empirical, _figure_path(args.out))
    print(
        f"nll={report.nll:.6f} crps={report.crps:.6f} cqm={report.cqm:.6f} "
        f"n_points={report.n_points}"
    )
    if report.warning:
        print(f"warning: {report.warning}")
    print(f"wrote {args.out}")
    print(f"wrote {figure}")
    return EXIT_OK


def cmd_predict(args) -> int:
    nf, model = _load_model(args.net, args.gapa)
    dataset = load_csv(args.data, _target_name(nf), missing_target_ok=True)
    preds = predict_rows(
        model.network,
        model.layer,
        model.state.calibration,
        dataset.features,
        model.state.propagation_mode,
        standardizer=nf.standardizer,
    )
    digest = config_digest({**load_config(None), "command": "predict"})
    header = list(dataset.column_names) + [
        "mean",
        "variance",
        "mean_std_units",
        "variance_std_units",
    ]
    rows = [
        list(x) + [p.mean, p.variance, p.standardized_mean, p.standardized_variance]
        for x, p in zip(dataset.features, preds)
    ]
    _write_table(args.out, header, rows, digest)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    nf, model = _load_model(args.net, args.gapa)
    if model.network.in_dim != 1:
        raise ConfigurationError(
            f"plotdata requires a 1-D-input model, got input dim {model.network.in_dim}"
        )
    if args.grid_n < 2:
        raise ConfigurationError(f"--grid-n must be >= 2, got {args.grid_n}")
    if not args.grid_min < args.grid_max:
        raise ConfigurationError(
            f"--grid-min must be below --grid-max, got [{args.grid_min}, {args.grid_max}]"
        )
    xs = np.linspace(args.grid_min, args.grid_max, args.grid_n)
    mean = np.empty(args.grid_n)
    lower = np.empty(args.grid_n)
    upper = np.empty(args.grid_n)
    for i, x in enumerate(xs):
        pred = gapa_forward(
            model.network,
            model.layer,
            model.state.calibration,
            [x],
            model.state.propagation_mode,
            standardizer=nf.standardizer,
        )
        sigma = float(np.sqrt(pred.variance))
        mean[i] = pred.mean
        lower[i] = pred.mean - 2.0 * sigma
        upper[i] = pred.mean + 2.0 * sigma
    digest = config_digest(
        {
            **load_config(None),
            "command": "plotdata",
            "grid_min": args.grid_min,
            "grid_max": args.grid_max,
            "grid_n": args.grid_n,
        }
    )
    _write_table(args.out, ["x", "mean", "lower", "upper"], zip(xs, mean, lower, upper), digest)
    figure = uncertainty_band_figure(xs, mean, lower, upper, _figure_path(args.out))
    print(f"wrote {args.out} ({args.grid_n} rows)")
    print(f"wrote {figure}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    nf, model = _load_model(args.net, args.gapa)
    dataset = load_csv(args.data, _target_name(nf))
    problem = build_variational_problem(model, dataset, standardizer=nf.standardizer)
    params = problem.initial_params(model.layer)
    error = grad_check(lambda p: problem.objective(p), params, args.h)
    print(f"max relative gradient error {error:.6e} over {params.size} parameters")
    if error <= GRAD_CHECK_TOL:
        print(f"PASS (tolerance {GRAD_CHECK_TOL:g})")
        return EXIT_OK
    print(f"FAIL (tolerance {GRAD_CHECK_TOL:g})")
    return EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gapa",
        description="Post-hoc GP-activation uncertainty for feedforward regression networks.",
        epilog="GAPA_THREADS caps worker parallelism; exit codes: 0 ok, 1 check failed, "
        "2 usage/config, 3 numerical/training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate the gap toy dataset as CSV")
    p.add_argument("--n", type=int, required=True, help="number of rows (>= 10)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train-backbone", help="train the dense regression network")
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True, help="target column name")
    p.add_argument("--spec", default=None, help="layer spec, e.g. 1-32-32-1:tanh")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("fit", help="fit the GAPA layer and calibrate")
    p.add_argument("--net", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("free", "variational"), default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score a fitted model (writes report + figure)")
    p.add_argument("--net", required=True)
    p.add_argument("--gapa", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-row mean/variance CSV")
    p.add_argument("--net", required=True)
    p.add_argument("--gapa", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plotdata", help="1-D band data CSV + band figure")
    p.add_argument("--net", required=True)
    p.add_argument("--gapa", required=True)
    p.add_argument("--grid-min", type=float, required=True)
    p.add_argument("--grid-max", type=float, required=True)
    p.add_argument("--grid-n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("grad-check", help="verify variational gradients by finite differences")
    p.add_argument("--net", required=True)
    p.add_argument("--gapa", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NotPositiveDefiniteError, NumericalConsistencyError, TrainingError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigurationError, IngestionError, PersistenceError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GapaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
