"""Command-line interface.

Subcommands map 1:1 onto the pipeline stages::

    trialforge simulate --n 1000 --seed 42 --out sim.csv
    trialforge prepare  --input sim.csv --estimand PP ... --out_dir work/
    trialforge sample   --input work/expanded.csv --p_control 0.5 --seed 7 --out sampled.csv
    trialforge fit      --input sampled.csv --estimand PP ... --out_dir work/
    trialforge predict  --model work/msm.json --newdata nd.csv --predict_times 0-9 --seed 1
    trialforge run      --config run.json

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure (non-convergence is a warning unless --strict).  Relative paths
resolve against $TRIALFORGE_WORKDIR when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from ._version import __version__
from .errors import (
    InputError,
    NonConvergenceWarning,
    NumericalError,
    StageError,
    TrialForgeError,
)

log = logging.getLogger("trialforge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage text + exit 1 on bad flags
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _workdir() -> Path:
    return Path(os.environ.get("TRIALFORGE_WORKDIR", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _workdir() / p


def _parse_covariates(text: str) -> dict[str, str]:
    out = {}
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        name, _, kind = piece.partition(":")
        out[name.strip()] = (kind.strip() or "continuous")
    return out


def _parse_times(text: str) -> list[int]:
    times: list[int] = []
    for piece in text.split(","):
        piece = piece.strip()
        if "-" in piece:
            lo, hi = piece.split("-", 1)
            times.extend(range(int(lo), int(hi) + 1))
        elif piece:
            times.append(int(piece))
    return times


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--quiet", action="store_true", help="suppress progress messages")
    p.add_argument("--strict", action="store_true",
                   help="treat model non-convergence as an error (exit 2)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap intra-stage parallelism (default: machine cores)")


def _add_column_flags(p: argparse.ArgumentParser):
    p.add_argument("--id", default="id", help="individual identifier column")
    p.add_argument("--period", default="period", help="visit/period column")
    p.add_argument("--treatment", default="treatment", help="treatment indicator column")
    p.add_argument("--outcome", default="outcome", help="outcome indicator column")
    p.add_argument("--eligible", default="eligible", help="eligibility indicator column")
    p.add_argument("--cense", default=None, help="censoring indicator column")
    p.add_argument("--covariates", default="",
                   help="covariates as name:kind pairs, e.g. 'X1:binary,X2:continuous'")


def _add_prepare_flags(p: argparse.ArgumentParser):
    p.add_argument("--estimand", required=True, help="ITT, PP or As-Treated")
    p.add_argument("--outcome_cov", default="1", help="baseline covariate formula terms")
    p.add_argument("--model_var", default="assigned_treatment",
                   help="comma list from: assigned_treatment, dose")
    p.add_argument("--where_var", default="", help="comma list of columns to carry through")
    p.add_argument("--first_period", type=int, default=None)
    p.add_argument("--last_period", type=int, default=None)
    p.add_argument("--chunk_size", type=int, default=500)
    p.add_argument("--separate_files", action="store_true",
                   help="write one CSV per emulated trial")
    p.add_argument("--use_censor_weights", action="store_true")
    p.add_argument("--cense_d_cov", default="1")
    p.add_argument("--cense_n_cov", default=None)
    p.add_argument("--switch_d_cov", default="1")
    p.add_argument("--switch_n_cov", default=None)
    p.add_argument("--pool_cense", default=None, choices=["none", "both", "numerator"])
    p.add_argument("--eligible_wts_0", default=None)
    p.add_argument("--eligible_wts_1", default=None)
    p.add_argument("--truncation", default="asis",
                   help="asis, p99, unweighted, or 'lo,hi' limits")


def _add_msm_flags(p: argparse.ArgumentParser):
    p.add_argument("--include_followup_time", default=None,
                   help="follow-up terms (default: followup_time + pow(followup_time,2))")
    p.add_argument("--include_trial_period", default=None,
                   help="trial terms (default: trial_period + pow(trial_period,2))")
    p.add_argument("--first_followup", type=int, default=None)
    p.add_argument("--last_followup", type=int, default=None)
    p.add_argument("--analysis_weights", default="asis",
                   help="asis, p99, unweighted, or 'lo,hi' limits")
    p.add_argument("--where_case", default=None, help="subgroup condition, e.g. 'age >= 30'")
    p.add_argument("--use_sample_weights", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="trialforge", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"trialforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic longitudinal dataset")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--max_visit", type=int, default=9)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--disable_censoring", action="store_true")
    p.add_argument("--disable_confounding", action="store_true")
    p.add_argument("--override", action="append", default=[],
                   metavar="EQ.COEF=VALUE",
                   help="coefficient override, e.g. outcome.treatment=0 (repeatable)")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("prepare", help="fit weight models and expand into trials")
    p.add_argument("--input", required=True)
    _add_column_flags(p)
    _add_prepare_flags(p)
    p.add_argument("--out_dir", required=True)
    _add_common(p)

    p = sub.add_parser("sample", help="case-control sample expanded rows")
    p.add_argument("--input", required=True,
                   help="expanded CSV, or a directory of trial_<m>.csv files")
    p.add_argument("--p_control", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--subset_condition", default=None)
    p.add_argument("--no_sort", action="store_true",
                   help="keep input order instead of the canonical sort")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("fit", help="fit the pooled logistic outcome model")
    p.add_argument("--input", required=True,
                   help="expanded/sampled CSV, or a directory of trial_<m>.csv files")
    p.add_argument("--estimand", required=True)
    p.add_argument("--outcome_cov", default="1")
    p.add_argument("--model_var", default="assigned_treatment")
    p.add_argument("--covariates", default="",
                   help="declared kinds for categorical handling, e.g. 'region:categorical'")
    _add_msm_flags(p)
    p.add_argument("--out_dir", required=True)
    _add_common(p)

    p = sub.add_parser("predict", help="marginal cumulative incidence / survival")
    p.add_argument("--model", required=True, help="msm.json from 'fit' or 'run'")
    p.add_argument("--newdata", required=True, help="CSV of baseline covariates + trial_period")
    p.add_argument("--predict_times", default="0-9", help="e.g. '0-9' or '0,2,4'")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--no_conf_int", action="store_true")
    p.add_argument("--type", default="cum_inc", choices=["cum_inc", "survival"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no_plot", action="store_true", help="skip the PNG figure")
    p.add_argument("--out_dir", required=True)
    _add_common(p)

    p = sub.add_parser("run", help="run the whole pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true", help="recompute all stages")
    _add_common(p)

    return parser


def _setup(args) -> None:
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    if args.threads is not None:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=max(1, args.threads))
        except ImportError:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(max(1, args.threads))


def _prepare_config(args) -> "RunConfig":
    from .data_model import ColumnMap
    from .expansion import Estimand, ExpansionOptions
    from .msm import MsmSpec
    from .pipeline import RunConfig
    from .weights import TruncationPolicy, WeightSpec

    covariates = _parse_covariates(args.covariates)
    from .design import parse_terms

    outcome_terms = parse_terms(args.outcome_cov)
    outcome_vars = [v for t in outcome_terms for v in t.variables()]
    snapshot = [v for v in outcome_vars if v in covariates]
    where_vars = [v for v in args.where_var.split(",") if v.strip()]
    trunc = args.truncation
    if "," in trunc:
        lo, hi = trunc.split(",")
        trunc = TruncationPolicy("limits", float(lo), float(hi))
    return RunConfig(
        input=str(_resolve(args.input)),
        columns=ColumnMap(
            id=args.id, period=args.period, treatment=args.treatment,
            outcome=args.outcome, eligible=args.eligible, censored=args.cense,
            covariates=covariates,
        ),
        estimand=Estimand.parse(args.estimand),
        expansion=ExpansionOptions(
            first_period=args.first_period,
            last_period=args.last_period,
            chunk_size=args.chunk_size,
            separate_files=args.separate_files,
            model_var=tuple(v for v in args.model_var.split(",") if v),
            outcome_covariates=tuple(dict.fromkeys(snapshot)),
            where_vars=tuple(where_vars),
        ),
        weights=WeightSpec(
            use_censor_weights=args.use_censor_weights,
            cense_d_cov=args.cense_d_cov,
            cense_n_cov=args.cense_n_cov,
            switch_d_cov=args.switch_d_cov,
            switch_n_cov=args.switch_n_cov,
            pool_cense=args.pool_cense,
            eligible_wts_0=args.eligible_wts_0,
            eligible_wts_1=args.eligible_wts_1,
            truncation=trunc,
        ),
        msm=MsmSpec(outcome_covariates=tuple(outcome_terms)),
        output_dir=str(_resolve(args.out_dir)),
    )


def _cmd_simulate(args) -> int:
    from .simulate import SimConfig, simulate_dataset, write_simulated_csv

    overrides = {}
    for item in args.override:
        key, _, value = item.partition("=")
        overrides[key.strip()] = float(value)
    cfg = SimConfig(
        n=args.n, max_visit=args.max_visit, seed=args.seed,
        disable_censoring=args.disable_censoring,
        disable_confounding=args.disable_confounding,
    ).with_overrides(overrides)
    ds = simulate_dataset(cfg)
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_simulated_csv(ds, out)
    log.info("wrote %d records for %d individuals to %s", len(ds), ds.n_individuals, out)
    return 0


def _cmd_prepare(args) -> int:
    from .data_model import load_longitudinal_csv
    from .expansion import CsvTrialSink, derive_time_on_regime, expand, expand_chunked
    from .weights import attach_weights, compute_period_ratios, fit_weight_models, truncate_weights

    config = _prepare_config(args)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = load_longitudinal_csv(config.input, config.columns)
    log.info("loaded %d records for %d individuals", len(ds), ds.n_individuals)

    estimand = config.estimand
    categorical = tuple(k for k, v in config.columns.covariates.items() if v == "categorical")
    ratios = None
    if config.weights.use_censor_weights or estimand.value in ("PP", "AsTreated"):
        ds_tor = derive_time_on_regime(ds)
        models = fit_weight_models(ds_tor, config.weights, estimand, categorical)
        ratios = compute_period_ratios(ds_tor, models)
        (out_dir / "weight_models.json").write_text(json.dumps(models.to_jsonable(), indent=2))
        ratios.to_csv(out_dir / "ratios.csv", index=False)

    def attach(rows):
        if ratios is None:
            return rows
        rows = attach_weights(rows, ratios, estimand, config.weights.use_censor_weights)
        return truncate_weights(rows, config.weights.truncation)

    if config.expansion.separate_files:
        sink = CsvTrialSink(out_dir / "trials")
        manifest = expand_chunked(ds, estimand, config.expansion, sink, row_transform=attach)
        log.info("wrote %d trial file(s) under %s", len(manifest), out_dir / "trials")
    else:
        rows = attach(expand(ds, estimand, config.expansion))
        rows.to_csv(out_dir / "expanded.csv", index=False)
        log.info("wrote %d expanded rows to %s", len(rows), out_dir / "expanded.csv")
    return 0


def _load_rows(path: Path):
    from .data_model import read_csv_exact
    from .errors import SchemaError
    from .expansion import read_trial_files

    if path.is_dir():
        return read_trial_files(path)
    if not path.exists():
        raise SchemaError(f"input file not found: {path}")
    return read_csv_exact(path)


def _cmd_sample(args) -> int:
    from .sampling import SamplingOptions, case_control_sample

    rows = _load_rows(_resolve(args.input))
    opts = SamplingOptions(
        p_control=args.p_control, seed=args.seed,
        subset_condition=args.subset_condition, sort=not args.no_sort,
    )
    sampled = case_control_sample(rows, opts)
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sampled.to_csv(out, index=False)
    log.info("kept %d of %d rows to %s", len(sampled), len(rows), out)
    return 0


def _cmd_fit(args) -> int:
    from .expansion import Estimand
    from .msm import MsmSpec, fit_msm
    from .weights import TruncationPolicy

    rows = _load_rows(_resolve(args.input))
    analysis = args.analysis_weights
    if "," in analysis:
        lo, hi = analysis.split(",")
        analysis = TruncationPolicy("limits", float(lo), float(hi))
    spec = MsmSpec(
        outcome_covariates=args.outcome_cov,
        model_var=tuple(v for v in args.model_var.split(",") if v),
        followup_terms=args.include_followup_time,
        trial_terms=args.include_trial_period,
        first_followup=args.first_followup,
        last_followup=args.last_followup,
        where_case=args.where_case,
        analysis_weights=analysis,
        use_sample_weights=args.use_sample_weights,
    )
    categorical = tuple(
        k for k, v in _parse_covariates(args.covariates).items() if v == "categorical"
    )
    fit = fit_msm(rows, spec, estimand=Estimand.parse(args.estimand), categorical=categorical)
    out_dir = _resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fit.save_json(out_dir / "msm.json")
    fit.summary().to_csv(out_dir / "msm_coefficients.csv", index=False)
    if not args.quiet:
        print(fit.summary().to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    log.info("wrote %s and %s", out_dir / "msm.json", out_dir / "msm_coefficients.csv")
    return 0


def _cmd_predict(args) -> int:
    from .data_model import read_csv_exact
    from .msm import MsmFit
    from .predict import marginal_effect

    fit = MsmFit.load_json(_resolve(args.model))
    newdata = read_csv_exact(_resolve(args.newdata))
    pred = marginal_effect(
        fit,
        newdata,
        predict_times=_parse_times(args.predict_times),
        samples=args.samples,
        conf_int=not args.no_conf_int,
        kind=args.type,
        seed=args.seed,
    )
    out_dir = _resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred.to_csv(out_dir / "prediction.csv")
    if not args.no_plot:
        from .report import render_marginal_figure

        render_marginal_figure(pred, out_dir / "prediction.png")
        log.info("wrote %s", out_dir / "prediction.png")
    log.info("wrote %s", out_dir / "prediction.csv")
    return 0


def _cmd_run(args) -> int:
    from .pipeline import RunConfig, run_pipeline

    config = RunConfig.from_json(_resolve(args.config))
    run_pipeline(config, force=args.force)
    log.info("run record written to %s", Path(config.output_dir) / "run_record.json")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup(args)
    handlers = {
        "simulate": _cmd_simulate,
        "prepare": _cmd_prepare,
        "sample": _cmd_sample,
        "fit": _cmd_fit,
        "predict": _cmd_predict,
        "run": _cmd_run,
    }
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code = handlers[args.command](args)
        non_converged = False
        for wm in caught:
            log.warning("warning: %s", wm.message)
            non_converged |= issubclass(wm.category, NonConvergenceWarning)
        if args.strict and non_converged:
            raise NumericalError("a model fit did not converge (--strict)")
        return code
    except StageError as exc:
        kind, code = (
            ("numerical failure", 2) if isinstance(exc.cause, NumericalError) else ("error", 1)
        )
        print(f"trialforge: {kind}: {exc}", file=sys.stderr)
        return code
    except InputError as exc:
        print(f"trialforge: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"trialforge: numerical failure: {exc}", file=sys.stderr)
        return 2
    except TrialForgeError as exc:
        print(f"trialforge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
