"""End-to-end orchestration: prepare, sample, fit, predict in one run.

A :class:`RunConfig` (JSON-serialisable) drives the stages
load -> weights -> expand -> sample -> fit -> predict.  Each stage's
inputs are hashed (configuration plus upstream state), completed stages
are skipped on rerun unless forced, and a :class:`RunRecord` documents
everything needed to reproduce the run.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import pandas as pd

from ._version import __version__
from .data_model import ColumnMap, load_longitudinal_csv, read_csv_exact
from .errors import ConfigError, StageError
from .expansion import (
    CsvTrialSink,
    Estimand,
    ExpansionOptions,
    derive_time_on_regime,
    expand,
    expand_chunked,
    read_trial_files,
)
from .msm import MsmFit, MsmSpec, fit_msm
from .predict import marginal_effect, trial_baselines
from .sampling import SamplingOptions, case_control_sample
from .weights import (
    WeightSpec,
    attach_weights,
    compute_period_ratios,
    fit_weight_models,
    truncate_weights,
)

log = logging.getLogger("trialforge")


@dataclass(frozen=True)
class PredictionConfig:
    newdata: object  # path to a CSV, or {"trial_period": m} to use trial baselines
    predict_times: tuple[int, ...]
    samples: int = 100
    conf_int: bool = True
    kind: str = "cum_inc"
    seed: int = 0
    plot: bool = True

    def to_dict(self) -> dict:
        return {
            "newdata": self.newdata,
            "predict_times": list(self.predict_times),
            "samples": self.samples,
            "conf_int": self.conf_int,
            "type": self.kind,
            "seed": self.seed,
            "plot": self.plot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionConfig":
        return cls(
            newdata=d["newdata"],
            predict_times=tuple(int(t) for t in d["predict_times"]),
            samples=int(d.get("samples", 100)),
            conf_int=bool(d.get("conf_int", True)),
            kind=d.get("type", "cum_inc"),
            seed=int(d.get("seed", 0)),
            plot=bool(d.get("plot", True)),
        )


@dataclass
class RunConfig:
    input: str
    columns: ColumnMap
    estimand: Estimand
    expansion: ExpansionOptions = field(default_factory=ExpansionOptions)
    weights: WeightSpec = field(default_factory=WeightSpec)
    msm: MsmSpec = field(default_factory=MsmSpec)
    sampling: Optional[SamplingOptions] = None
    prediction: Optional[PredictionConfig] = None
    output_dir: str = "."

    def __post_init__(self):
        self.estimand = Estimand.parse(self.estimand)
        self.validate()

    def validate(self) -> None:
        if self.weights.use_censor_weights:
            if self.columns.censored is None:
                raise ConfigError("use_censor_weights requires a 'censored' column mapping")
            # raises on ITT + pool_cense 'none'
            self.weights.resolve_pool_cense(self.estimand)
        if self.prediction is not None and self.estimand is Estimand.AS_TREATED:
            raise ConfigError("prediction of marginal effects is not supported for As-Treated runs")
        if self.prediction is not None and self.prediction.conf_int and self.prediction.samples < 2:
            raise ConfigError("prediction with conf_int requires samples >= 2")
        if self.sampling is not None and not self.msm.use_sample_weights:
            raise ConfigError("case-control sampling requires msm.use_sample_weights = true")

    def to_dict(self) -> dict:
        def terms_text(terms):
            return " + ".join(t.formula_text() for t in terms)

        return {
            "input": str(self.input),
            "columns": self.columns.to_dict(),
            "estimand": self.estimand.value,
            "expansion": {
                "first_period": self.expansion.first_period,
                "last_period": self.expansion.last_period,
                "chunk_size": self.expansion.chunk_size,
                "separate_files": self.expansion.separate_files,
                "model_var": list(self.expansion.model_var),
                "outcome_covariates": list(self.expansion.outcome_covariates),
                "where_vars": list(self.expansion.where_vars),
            },
            "weights": {
                "use_censor_weights": self.weights.use_censor_weights,
                "cense_d_cov": terms_text(self.weights.cense_d_cov),
                "cense_n_cov": (
                    terms_text(self.weights.cense_n_cov)
                    if self.weights.cense_n_cov is not None
                    else None
                ),
                "switch_d_cov": terms_text(self.weights.switch_d_cov),
                "switch_n_cov": (
                    terms_text(self.weights.switch_n_cov)
                    if self.weights.switch_n_cov is not None
                    else None
                ),
                "pool_cense": self.weights.pool_cense,
                "eligible_wts_0": self.weights.eligible_wts_0,
                "eligible_wts_1": self.weights.eligible_wts_1,
                "truncation": self.weights.truncation.to_jsonable(),
            },
            "msm": self.msm.to_dict(),
            "sampling": (
                {
                    "p_control": self.sampling.p_control,
                    "seed": self.sampling.seed,
                    "subset_condition": self.sampling.subset_condition,
                    "sort": self.sampling.sort,
                }
                if self.sampling is not None
                else None
            ),
            "prediction": self.prediction.to_dict() if self.prediction is not None else None,
            "output_dir": str(self.output_dir),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        w = d.get("weights", {})
        sampling = d.get("sampling")
        msm_d = d.get("msm", {})
        msm_spec_dict = dict(msm_d)
        for key in ("outcome_covariates", "followup_terms", "trial_terms"):
            # allow either formula strings or term dicts
            val = msm_spec_dict.get(key)
            if isinstance(val, str):
                from .design import parse_terms

                msm_spec_dict[key] = [t.to_dict() for t in parse_terms(val)]
        exp = d.get("expansion", {})
        return cls(
            input=d["input"],
            columns=ColumnMap.from_dict(d["columns"]),
            estimand=Estimand.parse(d["estimand"]),
            expansion=ExpansionOptions(
                first_period=exp.get("first_period"),
                last_period=exp.get("last_period"),
                chunk_size=int(exp.get("chunk_size", 500)),
                separate_files=bool(exp.get("separate_files", False)),
                model_var=tuple(exp.get("model_var", ("assigned_treatment",))),
                outcome_covariates=tuple(exp.get("outcome_covariates", ())),
                where_vars=tuple(exp.get("where_vars", ())),
            ),
            weights=WeightSpec(
                use_censor_weights=bool(w.get("use_censor_weights", False)),
                cense_d_cov=w.get("cense_d_cov"),
                cense_n_cov=w.get("cense_n_cov"),
                switch_d_cov=w.get("switch_d_cov"),
                switch_n_cov=w.get("switch_n_cov"),
                pool_cense=w.get("pool_cense"),
                eligible_wts_0=w.get("eligible_wts_0"),
                eligible_wts_1=w.get("eligible_wts_1"),
                truncation=w.get("truncation", "asis"),
            ),
            msm=MsmSpec.from_dict(msm_spec_dict),
            sampling=(
                SamplingOptions(
                    p_control=float(sampling["p_control"]),
                    seed=int(sampling["seed"]),
                    subset_condition=sampling.get("subset_condition"),
                    sort=bool(sampling.get("sort", True)),
                )
                if sampling
                else None
            ),
            prediction=(
                PredictionConfig.from_dict(d["prediction"]) if d.get("prediction") else None
            ),
            output_dir=d.get("output_dir", "."),
        )

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunRecord:
    config: dict
    version: str
    stages: dict[str, dict] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    summaries: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "version": self.version,
            "stages": self.stages,
            "artifacts": self.artifacts,
            "seeds": self.seeds,
            "summaries": self.summaries,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _key_of(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


class _StageState:
    """Content-addressed stage bookkeeping stored next to the artifacts."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / "stage_state.json"
        self.state = {}
        if self.path.exists():
            try:
                self.state = json.loads(self.path.read_text())
            except (OSError, json.JSONDecodeError):
                self.state = {}

    def fresh(self, stage: str, key: str, artifacts: list[Path]) -> bool:
        entry = self.state.get(stage)
        return (
            entry is not None
            and entry.get("key") == key
            and all(Path(p).exists() for p in entry.get("artifacts", []))
            and {str(p) for p in artifacts} <= set(entry.get("artifacts", []))
        )

    def store(self, stage: str, key: str, artifacts: list[Path]) -> None:
        self.state[stage] = {"key": key, "artifacts": [str(p) for p in artifacts]}
        self.path.write_text(json.dumps(self.state, indent=2))


def run_pipeline(config: RunConfig, force: bool = False) -> RunRecord:
    """Execute all configured stages, skipping any whose inputs are unchanged."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = config.to_dict()
    record = RunRecord(config=cfg, version=__version__)
    state = _StageState(out_dir)
    estimand = config.estimand
    use_switch = estimand in (Estimand.PP, Estimand.AS_TREATED)

    def run_stage(name, key, artifacts, compute):
        t0 = time.perf_counter()
        if not force and state.fresh(name, key, artifacts):
            log.info("stage %-8s skipped (up to date)", name)
            record.stages[name] = {"status": "skipped", "key": key, "seconds": 0.0}
            return False
        try:
            compute()
        except Exception as exc:
            record.stages[name] = {
                "status": "failed",
                "key": key,
                "seconds": round(time.perf_counter() - t0, 3),
                "error": str(exc),
            }
            _finish(record, out_dir)
            raise StageError(name, exc) from exc
        state.store(name, key, artifacts)
        record.stages[name] = {
            "status": "computed",
            "key": key,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        log.info("stage %-8s done (%.2fs)", name, record.stages[name]["seconds"])
        return True

    # -- load ---------------------------------------------------------------
    input_path = Path(config.input)
    input_hash = _sha256_file(input_path) if input_path.exists() else "missing"
    load_key = _key_of({"input": input_hash, "columns": cfg["columns"]})
    holder: dict = {}

    def do_load():
        holder["ds"] = load_longitudinal_csv(input_path, config.columns)
        log.info(
            "loaded %d records for %d individuals", len(holder["ds"]), holder["ds"].n_individuals
        )

    run_stage("load", load_key, [], do_load)
    if "ds" not in holder:
        do_load()
    ds = holder["ds"]

    # -- weight models ------------------------------------------------------
    ratios_path = out_dir / "ratios.csv"
    wm_path = out_dir / "weight_models.json"
    weights_key = _key_of(
        {"load": load_key, "weights": cfg["weights"], "estimand": estimand.value}
    )
    need_weights = config.weights.use_censor_weights or use_switch
    categorical = tuple(
        name for name, kind in config.columns.covariates.items() if kind == "categorical"
    )

    if need_weights:
        def do_weights():
            ds_tor = derive_time_on_regime(ds)
            models = fit_weight_models(ds_tor, config.weights, estimand, categorical)
            ratios = compute_period_ratios(ds_tor, models)
            ratios.to_csv(ratios_path, index=False)
            wm_path.write_text(json.dumps(models.to_jsonable(), indent=2))

        run_stage("weights", weights_key, [ratios_path, wm_path], do_weights)
        record.artifacts["ratios"] = str(ratios_path)
        record.artifacts["weight_models"] = str(wm_path)
        ratios = read_csv_exact(ratios_path)
    else:
        ratios = None

    # -- expansion ----------------------------------------------------------
    expand_key = _key_of(
        {"weights": weights_key, "expansion": cfg["expansion"], "estimand": estimand.value}
    )
    expanded_path = out_dir / "expanded.csv"

    def attach(rows: pd.DataFrame) -> pd.DataFrame:
        if ratios is None:
            return rows
        rows = attach_weights(rows, ratios, estimand, config.weights.use_censor_weights)
        return truncate_weights(rows, config.weights.truncation)

    if config.expansion.separate_files:
        trial_dir = out_dir / "trials"

        def do_expand():
            sink = CsvTrialSink(trial_dir)
            expand_chunked(ds, estimand, config.expansion, sink, row_transform=attach)

        run_stage("expand", expand_key, [trial_dir], do_expand)
        record.artifacts["trials"] = str(trial_dir)
        fit_input_loader = lambda: read_trial_files(trial_dir)  # noqa: E731
    else:
        def do_expand():
            rows = attach(expand(ds, estimand, config.expansion))
            rows.to_csv(expanded_path, index=False)
            log.info("expanded to %d rows", len(rows))

        run_stage("expand", expand_key, [expanded_path], do_expand)
        record.artifacts["expanded"] = str(expanded_path)
        fit_input_loader = lambda: read_csv_exact(expanded_path)  # noqa: E731

    # -- case-control sampling ----------------------------------------------
    fit_source = fit_input_loader
    sample_key = _key_of({"expand": expand_key, "sampling": cfg["sampling"]})
    if config.sampling is not None:
        sampled_path = out_dir / "sampled.csv"

        def do_sample():
            sampled = case_control_sample(fit_input_loader(), config.sampling)
            sampled.to_csv(sampled_path, index=False)
            log.info("sampled down to %d rows", len(sampled))

        run_stage("sample", sample_key, [sampled_path], do_sample)
        record.artifacts["sampled"] = str(sampled_path)
        record.seeds["sampling"] = config.sampling.seed
        fit_source = lambda: read_csv_exact(sampled_path)  # noqa: E731

    # -- outcome model --------------------------------------------------------
    fit_key = _key_of({"sample": sample_key, "msm": cfg["msm"]})
    msm_path = out_dir / "msm.json"
    coef_path = out_dir / "msm_coefficients.csv"

    def do_fit():
        data = fit_source()
        fit = fit_msm(data, config.msm, estimand=estimand, categorical=categorical)
        fit.save_json(msm_path)
        fit.summary().to_csv(coef_path, index=False)
        log.info(
            "MSM fitted on %d rows / %d individuals (converged=%s)",
            fit.n_rows, fit.n_individuals, fit.glm.converged,
        )

    run_stage("fit", fit_key, [msm_path, coef_path], do_fit)
    record.artifacts["msm"] = str(msm_path)
    record.artifacts["msm_coefficients"] = str(coef_path)

    # -- marginal prediction --------------------------------------------------
    if config.prediction is not None:
        pcfg = config.prediction
        predict_key = _key_of({"fit": fit_key, "prediction": pcfg.to_dict()})
        pred_path = out_dir / "prediction.csv"
        fig_path = out_dir / "prediction.png"
        artifacts = [pred_path] + ([fig_path] if pcfg.plot else [])

        def do_predict():
            fit = MsmFit.load_json(msm_path)
            if isinstance(pcfg.newdata, dict):
                newdata = trial_baselines(fit_input_loader(), int(pcfg.newdata["trial_period"]))
            else:
                newdata = read_csv_exact(pcfg.newdata)
            pred = marginal_effect(
                fit,
                newdata,
                predict_times=pcfg.predict_times,
                samples=pcfg.samples,
                conf_int=pcfg.conf_int,
                kind=pcfg.kind,
                seed=pcfg.seed,
            )
            pred.to_csv(pred_path)
            if pcfg.plot:
                from .report import render_marginal_figure

                render_marginal_figure(pred, fig_path)

        run_stage("predict", predict_key, artifacts, do_predict)
        record.artifacts["prediction"] = str(pred_path)
        if pcfg.plot:
            record.artifacts["figure"] = str(fig_path)
        record.seeds["prediction"] = pcfg.seed

    _finish(record, out_dir)
    return record


def _finish(record: RunRecord, out_dir: Path) -> None:
    digests = {}
    for name, path in record.artifacts.items():
        p = Path(path)
        if p.is_file():
            digests[name] = _sha256_file(p)
        elif p.is_dir():
            digests[name] = _key_of(
                {f.name: _sha256_file(f) for f in sorted(p.glob("*.csv"))}
            )
    record.stages["_artifact_sha256"] = digests

    msm_path = Path(record.artifacts.get("msm", ""))
    if msm_path.is_file():
        blob = json.loads(msm_path.read_text())
        record.summaries["msm"] = {
            "column_names": blob["column_names"],
            "coefficients": blob["coefficients"],
            "converged": blob["converged"],
            "n_rows": blob["n_rows"],
            "n_individuals": blob["n_individuals"],
        }
    wm_path = Path(record.artifacts.get("weight_models", ""))
    if wm_path.is_file():
        blob = json.loads(wm_path.read_text())
        record.summaries["weight_models"] = {
            kind: {
                side: [
                    {"stratum": m["stratum"], "converged": m["converged"], "n_obs": m["n_obs"]}
                    for m in group
                ]
                for side, group in sides.items()
                if group
            }
            for kind, sides in blob.items()
        }
    record.save(out_dir / "run_record.json")
