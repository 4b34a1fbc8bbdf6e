"""Command line interface: ``boostjm simulate | fit | tune | study | predict``.

Every subcommand accepts ``--config FILE``, a flat ``key = value`` file whose
keys are long option names (dashes or underscores). Command-line flags win
over the file. Exit codes: 0 success, 2 usage or invalid input, 1 numeric
failure during fitting.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import sys
from pathlib import Path

import numpy as np

from boostjm.baselearners import FitError
from boostjm.data import DataError, apply_scaling, load_csv, save_csv, standardize
from boostjm.engine import BoostConfig, BoostingError, FitResult, evaluate_risk, fit, predict_longitudinal
from boostjm.jointlik import HazardOverflowError
from boostjm.simgen import PRESET_NOISE, generate, preset, replicate_study
from boostjm.tuning import GridSpec, Holdout, KFold, tune_grid

log = logging.getLogger("boostjm")

USAGE_ERROR = 2
NUMERIC_ERROR = 1

LONG_FILE = "long.csv"
SURV_FILE = "surv.csv"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------


def grid_axis(text: str) -> tuple:
    """``min:max:step`` -> tuple of stopping iterations."""
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"grid axis must look like min:max:step, got {text!r}")
    try:
        lo, hi, step = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid axis needs integers, got {text!r}") from None
    if lo < 1 or step < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"invalid grid axis {text!r}")
    return tuple(range(lo, hi + 1, step))


def optional_level(text: str):
    if text.lower() in ("none", "off"):
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'none', got {text!r}") from None


def read_config(path) -> dict:
    """Flat ``key = value`` pairs; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for k, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{k}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _add_common(p, seed_required=False):
    p.add_argument("--config", help="flat key = value file with defaults for any option")
    p.add_argument("--seed", type=int, required=False, default=None,
                   help="random seed" + (" (required)" if seed_required else ""))
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for tuning and studies")
    p.add_argument("--timestamps", action="store_true", help="stamp text reports with the creation time")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(seed_required=seed_required)


def _add_data(p):
    p.add_argument("--long", help=f"longitudinal CSV (default DIR/{LONG_FILE} with --data)")
    p.add_argument("--surv", help=f"survival CSV (default DIR/{SURV_FILE} with --data)")
    p.add_argument("--data", help="directory holding the CSV pair written by 'simulate'")


def _add_boost(p):
    p.add_argument("--step-length", type=float, default=0.1)
    p.add_argument("--re-penalty", type=optional_level, default=1.0,
                   help="ridge weight of the random effects ('none' derives it from --re-df)")
    p.add_argument("--re-df", type=float, default=4.0)
    p.add_argument("--entry-level-l", type=optional_level, default=1e-4,
                   help="entry gate level for longitudinal covariates ('none' disables)")
    p.add_argument("--entry-level-ls", type=optional_level, default=1e-4,
                   help="entry gate level for shared covariates ('none' disables)")


def _add_grid(p):
    p.add_argument("--grid", type=grid_axis, default=grid_axis("30:300:30"),
                   help="stopping-iteration axis min:max:step (both sub-predictors)")
    p.add_argument("--grid-ls", type=grid_axis, default=None, help="separate axis for the shared sub-predictor")
    p.add_argument("--rounds", type=int, default=0, help="grid refinement rounds around the optimum")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boostjm", description="Boosting for joint longitudinal/survival models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a dataset")
    _add_common(p, seed_required=True)
    p.add_argument("--preset", default="S1", help=f"one of {', '.join(PRESET_NOISE)}")
    p.add_argument("--n-individuals", type=int, default=None)
    p.add_argument("--sigma2", type=float, default=None)
    p.add_argument("--lambda0", type=float, default=None)

    p = sub.add_parser("fit", help="fit at fixed stopping iterations")
    _add_common(p)
    _add_data(p)
    _add_boost(p)
    p.add_argument("--mstop-l", type=int, default=100)
    p.add_argument("--mstop-ls", type=int, default=100)

    p = sub.add_parser("tune", help="choose stopping iterations on a grid")
    _add_common(p, seed_required=True)
    _add_data(p)
    _add_boost(p)
    _add_grid(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--kfold", type=int, default=None, help="k-fold cross-validation")
    group.add_argument("--holdout", type=float, default=None,
                       help="holdout with this training fraction (default 2/3)")
    p.add_argument("--refit", action="store_true", help="fit the full data at the chosen pair")

    p = sub.add_parser("study", help="replicated simulation study")
    _add_common(p, seed_required=True)
    _add_boost(p)
    _add_grid(p)
    p.add_argument("--preset", default="S1")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--eval-size", type=int, default=1000, help="simulated evaluation individuals per replicate")
    p.add_argument("--no-tune", action="store_true", help="fit at --mstop-l/--mstop-ls instead of tuning")
    p.add_argument("--mstop-l", type=int, default=100)
    p.add_argument("--mstop-ls", type=int, default=100)

    p = sub.add_parser("predict", help="predictions and predictive risk of a saved model")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", required=False, help="model JSON written by 'fit' or 'tune --refit'")
    return parser


def parse_args(argv):
    """Parse twice: once to find ``--config``, then with its values as defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            if key not in known or key in ("config", "help"):
                raise UsageError(f"{args.config}: unknown option {key!r} for '{args.command}'")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                try:
                    defaults[key] = action.type(value)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"{args.config}: bad value for {key!r}: {exc}") from None
            else:
                defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.seed_required and args.seed is None:
        raise UsageError(f"'{args.command}' needs --seed")
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return args


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError(f"'{args.command}' needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_paths(args):
    long_path = args.long or (Path(args.data) / LONG_FILE if args.data else None)
    surv_path = args.surv or (Path(args.data) / SURV_FILE if args.data else None)
    if long_path is None or surv_path is None:
        raise UsageError("give --data DIR or both --long and --surv")
    if Path(long_path).resolve() == Path(surv_path).resolve():
        raise UsageError(f"longitudinal and survival inputs are the same file: {long_path}")
    for path in (long_path, surv_path):
        if not Path(path).is_file():
            raise UsageError(f"input file not found: {path}")
    return long_path, surv_path


def _boost_config(args, mstop_l=100, mstop_ls=100) -> BoostConfig:
    return BoostConfig(step_length=args.step_length, mstop_l=mstop_l, mstop_ls=mstop_ls,
                       re_penalty=args.re_penalty, re_df=args.re_df,
                       entry_level_l=args.entry_level_l, entry_level_ls=args.entry_level_ls)


def _grid(args) -> GridSpec:
    return GridSpec(args.grid, args.grid_ls or args.grid, args.rounds)


def _stamp(args) -> str:
    if not args.timestamps:
        return ""
    return f"created {datetime.datetime.now().isoformat(timespec='seconds')}\n"


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _write_fit(out: Path, res: FitResult):
    _write(out / "model.json", res.to_json() + "\n")
    with open(out / "path.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "sub_predictor", "term", "value"])
        for m, part, term, v in res.path_csv_rows():
            w.writerow([m, part, term, repr(v)])


def fit_report(res: FitResult) -> str:
    coef = res.original_scale()
    lines = [f"{'term':<16}{'sub-predictor':<16}coefficient"]
    lines.append(f"{'(intercept)':<16}{'long':<16}{coef['intercept_long']:.6g}")
    for name, v in coef["beta_long"].items():
        if v != 0:
            lines.append(f"{name:<16}{'long':<16}{v:.6g}")
    lines.append(f"{'(intercept)':<16}{'shared':<16}{coef['intercept_shared']:.6g}")
    for name, v in coef["beta_shared"].items():
        if v != 0:
            lines.append(f"{name:<16}{'shared':<16}{v:.6g}")
    lines.append(f"{'time':<16}{'shared':<16}{coef['beta_time']:.6g}")
    sel_l = sorted({res.bank_names_long[j] for j in res.selected_long})
    sel_s = sorted({res.bank_names_shared[j] for j in res.selected_shared})
    lines.append(f"selected (long): {', '.join(sel_l) if sel_l else '-'}")
    lines.append(f"selected (shared): {', '.join(sel_s) if sel_s else '-'}")
    nu = res.nuisance
    lines.append(f"sigma2 = {nu.sigma2:.6g}  alpha = {nu.alpha:.6g}  lambda0 = {nu.lambda0:.6g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.preset.upper() not in PRESET_NOISE:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESET_NOISE)}")
    overrides = {}
    if args.n_individuals is not None:
        overrides["N"] = args.n_individuals
    if args.sigma2 is not None:
        overrides["sigma2"] = args.sigma2
    if args.lambda0 is not None:
        overrides["lambda0"] = args.lambda0
    sim = generate(preset(args.preset, seed=args.seed, **overrides))
    out = _out_dir(args)
    save_csv(sim.dataset, out / LONG_FILE, out / SURV_FILE)
    _write(out / "truth.json", sim.truth_json() + "\n")
    print(f"censoring rate {sim.censoring_rate:.4f} ({sim.dataset.N} individuals, {sim.dataset.n} observations)")
    return 0


def cmd_fit(args) -> int:
    ds = load_csv(*_data_paths(args))
    std, manifest = standardize(ds)
    res = fit(std, cfg=_boost_config(args, args.mstop_l, args.mstop_ls), manifest=manifest)
    print(_stamp(args) + fit_report(res), end="")
    if args.out:
        _write_fit(_out_dir(args), res)
    return 0


def cmd_tune(args) -> int:
    ds = load_csv(*_data_paths(args))
    std, manifest = standardize(ds)
    if args.kfold is not None:
        method = KFold(args.kfold, args.seed)
    else:
        method = Holdout(2 / 3 if args.holdout is None else args.holdout, args.seed)
    cfg = _boost_config(args)
    res = tune_grid(std, _grid(args), method, cfg=cfg, jobs=args.jobs)
    print(_stamp(args) + f"chosen mstop_l = {res.chosen[0]}  mstop_ls = {res.chosen[1]}  risk = {res.risk:.6f}")
    out = _out_dir(args) if args.out else None
    if out is not None:
        _write(out / "tune.json", res.to_json() + "\n")
        _write(out / "surface.csv", res.surface_csv())
    if args.refit:
        final = fit(std, cfg=cfg.with_mstop(*res.chosen), manifest=manifest)
        print(fit_report(final), end="")
        if out is not None:
            _write_fit(out, final)
    return 0


def cmd_study(args) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    if args.preset.upper() not in PRESET_NOISE:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESET_NOISE)}")
    cfg = _boost_config(args, args.mstop_l, args.mstop_ls)
    grid = None if args.no_tune else _grid(args)
    rep = replicate_study(preset(args.preset, seed=args.seed), args.runs, grid, "eval", args.eval_size,
                          cfg, args.jobs)
    coef, stop = rep.coefficient_table(), rep.stopping_table()
    print(_stamp(args) + coef + "\n" + stop, end="")
    if args.out:
        out = _out_dir(args)
        _write(out / "runs.csv", rep.runs_csv())
        _write(out / "coefficients.txt", _stamp(args) + coef)
        _write(out / "stopping.txt", _stamp(args) + stop)
        _write(out / "study.json", rep.to_json() + "\n")
    return 0


def cmd_predict(args) -> int:
    if not args.model:
        raise UsageError("'predict' needs --model")
    try:
        text = Path(args.model).read_text(encoding="utf-8")
    except OSError:
        raise UsageError(f"model file not found: {args.model}") from None
    try:
        model = FitResult.from_json(text)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{args.model}: not a saved model ({exc})") from None
    ds = load_csv(*_data_paths(args))
    if ds.names_long != model.names_long or ds.names_shared != model.names_shared:
        raise UsageError("covariate columns differ from those of the model")
    scaled = apply_scaling(ds, model.manifest) if model.manifest is not None else ds
    fitted = predict_longitudinal(model, scaled.obs_ids, scaled.time, scaled.x_long, scaled.x_shared[scaled.group])
    risk = evaluate_risk(model, scaled)
    print(_stamp(args) + f"predictive risk {risk:.6f} over {ds.N} individuals")
    if args.out:
        out = _out_dir(args)
        with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "time", "y", "fitted"])
            for k in range(ds.n):
                w.writerow([int(ds.obs_ids[k]), repr(float(ds.time[k])), repr(float(ds.y[k])),
                            repr(float(fitted[k]))])
        _write(out / "risk.json", json.dumps({"risk": risk, "individuals": ds.N}, indent=2) + "\n")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "tune": cmd_tune, "study": cmd_study, "predict": cmd_predict}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"boostjm: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:  # argparse
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    # FitError is a ValueError, so numeric failures are caught first
    except (BoostingError, FitError, HazardOverflowError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"boostjm: numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except (UsageError, DataError, ValueError, OSError) as exc:
        print(f"boostjm: error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
