"""Command-line pipeline: ingest -> fit-msm / train -> evaluate ->
backtest, plus a synthetic-data generator.

Configuration comes from an optional JSON file with CLI-flag overrides;
the effective configuration is echoed into the output directory. Exit
codes: 0 success, 2 input error, 3 non-convergence, 4 numerical failure,
5 artifact mismatch.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import msm as msmmod
from . import report as rpt
from .backtest import run_backtest
from .switching import SwitchingConfig, SwitchingModel
from .synth import make_msm_bars, make_planted_bars
from .training import (BaselineClassifier, NumericalError, TrainConfig,
                       evaluate, train)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3
EXIT_NUMERICAL = 4
EXIT_MISMATCH = 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


DEFAULT_CONFIG: dict = {
    "data": None,
    "out": None,
    "seed": 0,
    "horizon": 20,
    "seq_len": 10,
    "train_frac": 0.8,
    "val_frac_of_train": 0.2,
    "columns": {
        "timestamp": "timestamp",
        "open": "open",
        "high": "high",
        "low": "low",
        "close": "close",
    },
    "model": {
        "kind": "gru",
        "switching": True,
        "regimes": 2,
        "layers": 2,
        "units": 100,
        "encoder_units": 0,
        "sub_layers": 3,
        "sub_out": 10,
        "grid_size": 5,
        "degree": 3,
        "rho_mode": "offdiag",
        "regime_input": "full",
    },
    "msm": {
        "regimes": 2,
        "covariates": [],
        "standardize": False,
        "starts": 5,
        "max_iter": 500,
    },
    "training": {
        "max_epochs": 200,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "early_stop_patience": 10,
        "lr_patience": 5,
        "lr_factor": 0.25,
        "min_delta": 1e-6,
    },
}


def _merge_checked(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key != "columns":
            if not isinstance(value, dict):
                raise CliError(f"config key {where} must be an object")
            out[key] = _merge_checked(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        with open(p) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as e:
                raise CliError(f"config {p} is not valid JSON: {e}") from None
        cfg = _merge_checked(cfg, user)
    if overrides:
        cfg = _merge_checked(cfg, overrides)
    return cfg


def _out_dir(cfg: dict, required: bool = True) -> Path:
    out = cfg.get("out") or os.environ.get("REGIMEKIT_OUT")
    if not out:
        if required:
            raise CliError("no output directory: pass --out or set REGIMEKIT_OUT")
        return Path(".")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo_config(cfg: dict, out: Path) -> None:
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_bars(cfg: dict):
    path = cfg.get("data")
    if not path:
        raise CliError("no input data: pass --data")
    if not Path(path).exists():
        raise CliError(f"data file not found: {path}")
    try:
        return dat.load_ohlc_csv(path, column_map=cfg["columns"])
    except dat.DataError as e:
        raise CliError(str(e)) from None


def _build_and_split(cfg: dict):
    bars = _load_bars(cfg)
    try:
        ds = dat.build_dataset(bars, horizon=cfg["horizon"],
                               seq_len=cfg["seq_len"],
                               train_frac=cfg["train_frac"])
        splits = dat.chrono_split(ds, cfg["train_frac"], cfg["val_frac_of_train"])
    except dat.DataError as e:
        raise CliError(str(e)) from None
    return ds, splits


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    cfg = load_config(args.config, _overrides_from(args))
    out = _out_dir(cfg)
    bars = _load_bars(cfg)
    try:
        timestamps, feat, labels = dat.pipeline_features(bars, horizon=cfg["horizon"])
        ds = dat.build_dataset(bars, horizon=cfg["horizon"], seq_len=cfg["seq_len"],
                               train_frac=cfg["train_frac"])
    except dat.DataError as e:
        raise CliError(str(e)) from None

    with open(out / "features.csv", "w") as fh:
        fh.write("date,ret,hml,iv,label\n")
        for t, row, lab in zip(timestamps, feat, labels):
            fh.write(f"{t},{row[0]:.10g},{row[1]:.10g},{row[2]:.10g},{int(lab)}\n")
    dat.save_dataset(ds, out / "dataset.bin", out / "dataset.json")
    _echo_config(cfg, out)
    print(f"ingest: {len(bars)} bars -> {len(feat)} labeled rows, "
          f"{len(ds)} windows -> {out}")
    return EXIT_OK


def cmd_fit_msm(args) -> int:
    cfg = load_config(args.config, _overrides_from(args))
    out = _out_dir(cfg)
    bars = _load_bars(cfg)
    rets = dat.log_returns(bars)
    covs = dat.covariate_series(bars)

    names = tuple(cfg["msm"]["covariates"])
    cov_mat = None
    if names:
        cols = []
        for name in names:
            if name == "hml":
                cols.append(covs.hml)
            elif name == "iv":
                cols.append(covs.iv)
            else:
                raise CliError(f"unknown transition covariate {name!r}")
        cov_mat = np.column_stack(cols)
        if cfg["msm"]["standardize"]:
            cov_mat, _ = dat.standardize(cov_mat, feature_names=names)

    spec = msmmod.MsmSpec(m=cfg["msm"]["regimes"], covariates=names)
    try:
        fit = msmmod.fit_mle(rets.r, cov_mat, spec, seed=cfg["seed"],
                             n_starts=cfg["msm"]["starts"],
                             max_iter=cfg["msm"]["max_iter"])
    except msmmod.MsmError as e:
        raise CliError(f"estimation failed: {e}", EXIT_NUMERICAL) from None

    rows = msmmod.coefficient_table(fit)
    _write_coef_table(rows, fit, out)
    fo = msmmod.hamilton_filter(rets.r, cov_mat, fit.params)
    smoothed = msmmod.kim_smoother(fo)
    with open(out / "smoothed.csv", "w") as fh:
        fh.write("date," + ",".join(f"regime_{k + 1}" for k in range(spec.m)) + "\n")
        for t, row in zip(rets.timestamps, smoothed):
            cells = ",".join(rpt.fmt(v) for v in row)
            fh.write(f"{t},{cells}\n")
    rpt.render_probability_figure(rets.timestamps, smoothed, out / "smoothed.png")
    _echo_config(cfg, out)

    print(f"fit-msm: m={spec.m} covariates={list(names)} "
          f"loglik={fit.loglik:.4f} converged={fit.converged}")
    for r in rows:
        se = rpt.fmt(r["std_err"]) or "n/a"
        print(f"  {r['section']:<12} {r['name']:<18} coef={r['coef']: .6f} "
              f"se={se}")
    if not fit.converged:
        print("fit-msm: optimizer did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _write_coef_table(rows, fit, out: Path) -> None:
    with open(out / "msm_coefficients.csv", "w") as fh:
        fh.write("section,name,coef,std_err,z,p_value,ci_low,ci_high\n")
        for r in rows:
            cells = [r["section"], r["name"]] + [
                rpt.fmt(r[k]) for k in ("coef", "std_err", "z", "p_value",
                                        "ci_low", "ci_high")
            ]
            fh.write(",".join(cells) + "\n")
    payload = {
        "loglik": round(fit.loglik, 6),
        "converged": fit.converged,
        "n_obs": fit.n_obs,
        "rows": [
            {k: (round(v, 6) if isinstance(v, float) else v)
             for k, v in r.items()}
            for r in rows
        ],
    }
    with open(out / "msm_coefficients.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _make_model(cfg: dict, n_features: int):
    mc = cfg["model"]
    common = dict(sub_layers=mc["sub_layers"], sub_out=mc["sub_out"],
                  grid_size=mc["grid_size"], degree=mc["degree"])
    if mc["switching"]:
        sconf = SwitchingConfig(
            m=mc["regimes"], cell=mc["kind"], layers=mc["layers"],
            units=mc["units"], seq_len=cfg["seq_len"], n_features=n_features,
            encoder_units=mc["encoder_units"], rho_mode=mc["rho_mode"],
            regime_input=mc["regime_input"], **common)
        return SwitchingModel(sconf, seed=cfg["seed"]), sconf.to_json()
    tkan_kw = common if mc["kind"] == "tkan" else {}
    model = BaselineClassifier(mc["kind"], n_features, units=mc["units"],
                               layers=mc["layers"], m=mc["regimes"],
                               seed=cfg["seed"], **tkan_kw)
    desc = dict(kind=mc["kind"], units=mc["units"], layers=mc["layers"],
                m=mc["regimes"], n_features=n_features, **common)
    return model, json.dumps(desc, sort_keys=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides_from(args))
    out = _out_dir(cfg)
    _, (train_ds, val_ds, test_ds) = _build_and_split(cfg)
    n_features = train_ds.windows.shape[2]
    model, model_desc = _make_model(cfg, n_features)
    tconf = TrainConfig(seed=cfg["seed"], **cfg["training"])

    try:
        report = train(model, train_ds, val_ds, tconf,
                       m=cfg["model"]["regimes"],
                       checkpoint_path=out / "model.ckpt")
    except NumericalError as e:
        raise CliError(str(e), EXIT_NUMERICAL) from None

    with open(out / "training_log.csv", "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr\n")
        for i, (tr, vl, lr) in enumerate(zip(report.train_losses,
                                             report.val_losses, report.lrs), 1):
            fh.write(f"{i},{tr:.6f},{vl:.6f},{lr:.6g}\n")
    rpt.render_training_figure(report.train_losses, report.val_losses,
                               out / "training.png")
    meta = {
        "model": json.loads(model_desc),
        "switching": cfg["model"]["switching"],
        "kind": cfg["model"]["kind"],
        "seed": cfg["seed"],
        "horizon": cfg["horizon"],
        "seq_len": cfg["seq_len"],
        "train_frac": cfg["train_frac"],
        "val_frac_of_train": cfg["val_frac_of_train"],
        "n_features": n_features,
        "best_epoch": report.best_epoch,
        "stopped_epoch": report.stopped_epoch,
    }
    with open(out / "model.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(cfg, out)
    print(f"train: {cfg['model']['kind']} switching={cfg['model']['switching']} "
          f"best_epoch={report.best_epoch} best_val={report.best_val_loss:.6f} "
          f"stopped={report.stopped_epoch} wall={report.wall_time:.1f}s")
    return EXIT_OK


def _load_model_dir(ckpt_path: Path, cfg: dict):
    meta_path = ckpt_path.parent / "model.json"
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    if not meta_path.exists():
        raise CliError(f"model description not found next to checkpoint: {meta_path}",
                       EXIT_MISMATCH)
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta["switching"]:
        sconf = SwitchingConfig(**meta["model"])
        model = SwitchingModel(sconf, seed=meta["seed"])
    else:
        md = meta["model"]
        tkan_kw = {}
        if md["kind"] == "tkan":
            tkan_kw = dict(sub_layers=md["sub_layers"], sub_out=md["sub_out"],
                           grid_size=md["grid_size"], degree=md["degree"])
        model = BaselineClassifier(md["kind"], md["n_features"],
                                   units=md["units"], layers=md["layers"],
                                   m=md["m"], seed=meta["seed"], **tkan_kw)
    try:
        state = ad.load_checkpoint(ckpt_path)
        model.load_state_dict(state)
    except (ValueError, KeyError) as e:
        raise CliError(f"checkpoint does not match model config: {e}",
                       EXIT_MISMATCH) from None
    return model, meta


def _select_split(splits, name: str):
    mapping = dict(zip(("train", "val", "test"), splits))
    if name not in mapping:
        raise CliError(f"unknown split {name!r}; choose train, val, or test")
    return mapping[name]


def _eval_on_split(args, cfg):
    ckpt = Path(args.checkpoint)
    model, meta = _load_model_dir(ckpt, cfg)
    for key in ("horizon", "seq_len", "train_frac", "val_frac_of_train"):
        cfg[key] = meta[key]
    _, splits = _build_and_split(cfg)
    split = _select_split(splits, args.split)
    if split.windows.shape[2] != meta["n_features"]:
        raise CliError(
            f"dataset has {split.windows.shape[2]} features but the model "
            f"expects {meta['n_features']}", EXIT_MISMATCH)
    m = meta["model"].get("m", cfg["model"]["regimes"])
    loss, preds, probs = evaluate(model, split, m=m)
    return model, meta, split, m, loss, preds, probs


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, _overrides_from(args))
    out = _out_dir(cfg)
    _, meta, split, m, loss, preds, probs = _eval_on_split(args, cfg)
    from .backtest import confusion_and_scores
    cm = confusion_and_scores(preds, split.labels, m=m)
    with open(out / "predictions.csv", "w") as fh:
        header = ",".join(f"p_{k}" for k in range(m))
        fh.write(f"date,label,predicted,{header}\n")
        for t, lab, pred, row in zip(split.timestamps, split.labels, preds, probs):
            cells = ",".join(rpt.fmt(v) for v in row)
            fh.write(f"{t},{int(lab)},{int(pred)},{cells}\n")
    rpt.write_confusion(cm, out / "confusion.csv")
    with open(out / "eval.json", "w") as fh:
        json.dump({"split": args.split, "loss": round(loss, 6),
                   "accuracy": round(cm.accuracy, 6),
                   "n_samples": int(len(split))}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(cfg, out)
    print(f"evaluate[{args.split}]: loss={loss:.6f} accuracy={cm.accuracy:.6f} "
          f"n={len(split)}")
    return EXIT_OK


def cmd_backtest(args) -> int:
    cfg = load_config(args.config, _overrides_from(args))
    out = _out_dir(cfg)
    _, meta, split, m, loss, preds, probs = _eval_on_split(args, cfg)
    result = run_backtest(preds, split.labels, split.raw_returns,
                          timestamps=split.timestamps)
    files = rpt.emit_report(result, out, label=f"{meta['kind']} {args.split}")
    with open(out / "predictions.csv", "w") as fh:
        header = ",".join(f"p_{k}" for k in range(m))
        fh.write(f"date,label,predicted,position,{header}\n")
        for t, lab, pred, pos, row in zip(split.timestamps, split.labels,
                                          preds, result.positions, probs):
            cells = ",".join(rpt.fmt(v) for v in row)
            fh.write(f"{t},{int(lab)},{int(pred)},{int(pos)},{cells}\n")
    files.append("predictions.csv")
    _echo_config(cfg, out)
    mt = result.metrics
    print(f"backtest[{args.split}]: accuracy={result.confusion.accuracy:.4f} "
          f"mean_return={mt.mean_return:.6f} sharpe={rpt.fmt(mt.sharpe) or 'n/a'} "
          f"mdd={mt.max_drawdown:.6f}")
    print(f"backtest: wrote {', '.join(files)} -> {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _overrides_from(args))
    out_file = Path(args.out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "planted":
        bars, states = make_planted_bars(n=args.t, block=args.block,
                                         seed=cfg["seed"])
    else:
        m = cfg["msm"]["regimes"]
        alpha = np.linspace(0.001, 0.002, m)
        sigma2 = np.geomspace(2e-4, 2.4e-3, m)
        beta = np.zeros((m, m - 1, 1))
        for i in range(m - 1):
            beta[i, i, 0] = 2.0
        beta[m - 1, :, 0] = -1.5
        params = msmmod.MsmParams(alpha=alpha, sigma2=sigma2, beta=beta)
        bars, states, _ = make_msm_bars(params, args.t, seed=cfg["seed"])
    with open(out_file, "w") as fh:
        fh.write("timestamp,open,high,low,close\n")
        for b in bars:
            fh.write(f"{b.timestamp},{b.open:.10g},{b.high:.10g},"
                     f"{b.low:.10g},{b.close:.10g}\n")
    if args.states_out:
        with open(args.states_out, "w") as fh:
            fh.write("timestamp,state\n")
            for b, s in zip(bars, np.concatenate(([states[0]], states))
                            if len(states) + 1 == len(bars) else states):
                fh.write(f"{b.timestamp},{int(s)}\n")
    print(f"simulate[{args.mode}]: wrote {len(bars)} bars -> {out_file}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _overrides_from(args) -> dict:
    """Collect flag overrides into config shape."""
    ov: dict = {}
    simple = {"data": "data", "out": "out", "seed": "seed",
              "horizon": "horizon", "seq_len": "seq_len"}
    for attr, key in simple.items():
        v = getattr(args, attr, None)
        if v is not None:
            ov[key] = v
    model = {}
    if getattr(args, "model", None) is not None:
        model["kind"] = args.model
    if getattr(args, "switching", None) is not None:
        model["switching"] = args.switching == "on"
    if getattr(args, "regimes", None) is not None:
        model["regimes"] = args.regimes
    if getattr(args, "units", None) is not None:
        model["units"] = args.units
    if getattr(args, "layers", None) is not None:
        model["layers"] = args.layers
    if model:
        ov["model"] = model
    msm_ov = {}
    if getattr(args, "regimes", None) is not None:
        msm_ov["regimes"] = args.regimes
    if getattr(args, "covariates", None) is not None:
        msm_ov["covariates"] = ([] if args.covariates == "none"
                                else args.covariates.split(","))
    if getattr(args, "standardize", None):
        msm_ov["standardize"] = True
    if getattr(args, "starts", None) is not None:
        msm_ov["starts"] = args.starts
    if msm_ov:
        ov["msm"] = msm_ov
    training = {}
    if getattr(args, "epochs", None) is not None:
        training["max_epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        training["batch_size"] = args.batch_size
    if getattr(args, "learning_rate", None) is not None:
        training["learning_rate"] = args.learning_rate
    if training:
        ov["training"] = training
    return ov


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regimekit",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default=None, help="JSON config file")
        if data:
            p.add_argument("--data", default=None, help="OHLC csv input")
        p.add_argument("--out", default=None,
                       help="output directory (default: env REGIMEKIT_OUT)")
        p.add_argument("--seed", type=int, default=None, help="random seed")

    p = sub.add_parser("ingest", help="load OHLC csv, emit features/labels/windows",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--horizon", type=int, default=None, help="labeling horizon in days")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None,
                   help="window length")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit-msm", help="maximum-likelihood regime-switching fit",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--regimes", type=int, default=None, choices=(2, 3),
                   help="number of regimes")
    p.add_argument("--covariates", default=None,
                   help="transition covariates: none, hml, or hml,iv")
    p.add_argument("--standardize", action="store_true",
                   help="standardize transition covariates before fitting")
    p.add_argument("--starts", type=int, default=None, help="optimizer multi-starts")
    p.set_defaults(func=cmd_fit_msm)

    p = sub.add_parser("train", help="train a classifier or switching model",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--model", choices=("gru", "lstm", "tkan"), default=None,
                   help="cell kind")
    p.add_argument("--switching", choices=("on", "off"), default=None,
                   help="switching assembly or plain classifier")
    p.add_argument("--regimes", type=int, default=None, help="number of regimes")
    p.add_argument("--units", type=int, default=None, help="hidden units per layer")
    p.add_argument("--layers", type=int, default=None, help="stacked layers")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None,
                   help="window length")
    p.add_argument("--horizon", type=int, default=None, help="labeling horizon")
    p.add_argument("--epochs", type=int, default=None, help="epoch cap")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--checkpoint", required=True, help="model.ckpt path")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("backtest", help="full report bundle from a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--checkpoint", required=True, help="model.ckpt path")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("simulate", help="generate a synthetic OHLC csv",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, data=False)
    p.add_argument("--mode", choices=("msm", "planted"), default="msm",
                   help="generator: constant-transition chain or planted blocks")
    p.add_argument("--t", type=int, default=2000, help="number of bars")
    p.add_argument("--block", type=int, default=100,
                   help="regime block length (planted mode)")
    p.add_argument("--regimes", type=int, default=None, help="regimes (msm mode)")
    p.add_argument("--out-file", dest="out_file", required=True,
                   help="destination csv")
    p.add_argument("--states-out", dest="states_out", default=None,
                   help="optional csv of the true simulated states")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
