"""HTTP service wrapping the pipeline; one endpoint per pipeline stage.

Volumes, fields, models, and datasets are exchanged by filesystem path (the
payloads are far too large for JSON); responses carry summaries. Handlers
are synchronous and deterministic given the request seeds. Domain errors map
onto status codes: 400 configuration, 409 data/format, 500 numerical.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, datastore, evaluation, phantoms, registration, training
from ..autodiff import nn
from ..errors import ConfigError, DataFormatError, InputError, JsmkitError, NumericsError
from ..fields import read_field
from ..saliency import class_counts, classify_voxels, compute_jsm
from ..training import FusionMode, JALConfig
from ..volume import Volume3D, read_nifti, read_volume, write_volume
from . import schemas

_ERROR_STATUS = {
    ConfigError: (400, "config"),
    InputError: (409, "data"),
    DataFormatError: (409, "data"),
    NumericsError: (500, "numerics"),
}


def _mode(name: str) -> FusionMode:
    try:
        return FusionMode(name)
    except ValueError:
        raise ConfigError(f"unknown fusion mode {name!r}; use early or late") from None


def _jal_config(options: schemas.TrainOptions, seed: int) -> JALConfig:
    return JALConfig(
        lam=options.lam,
        feature_weight=options.feature_weight,
        debug_weight=options.debug_weight,
        flat_tol=options.flat_tol,
        epochs=options.epochs,
        batch_size=options.batch_size,
        learning_rate=options.learning_rate,
        seed=seed,
        activation=options.activation,
        beta=options.beta,
        channels=tuple(options.channels),
    )


def _phantom_spec(opts: schemas.PhantomOptions) -> phantoms.PhantomSpec:
    base = phantoms.PhantomSpec()
    return phantoms.PhantomSpec(
        dims=(opts.dims,) * 3,
        template_blobs=opts.template_blobs,
        noise_sigma=opts.noise_sigma,
        amplitudes=tuple(opts.amplitudes) if opts.amplitudes else base.amplitudes,
        individual_sigma=opts.individual_sigma,
        marker_size=opts.marker_size,
        marker_levels=tuple(opts.marker_levels) if opts.marker_levels else base.marker_levels,
        confound_train=opts.confound_train,
        seed=opts.template_seed,
    )


def _read_any_volume(path: str) -> Volume3D:
    if path.endswith((".nii", ".hdr")):
        return read_nifti(path)
    return read_volume(path)


def _model_paths(model_dir: str, mode: FusionMode) -> list[str]:
    if mode is FusionMode.EARLY:
        return [os.path.join(model_dir, "model_early.jsmm")]
    return [
        os.path.join(model_dir, "model_mod1.jsmm"),
        os.path.join(model_dir, "model_mod2.jsmm"),
    ]


def _load_result(model_dir: str, mode: FusionMode) -> training.TrainResult:
    paths = _model_paths(model_dir, mode)
    for p in paths:
        if not os.path.exists(p):
            raise DataFormatError(f"missing model checkpoint {p}")
    return training.TrainResult(mode, [nn.load_model(p) for p in paths], [])


def create_app() -> FastAPI:
    app = FastAPI(title="jsmkit", version=__version__)

    @app.exception_handler(JsmkitError)
    def _domain_error(_req: Request, exc: JsmkitError):
        status, kind = 500, "numerics"
        for etype, mapping in _ERROR_STATUS.items():
            if isinstance(exc, etype):
                status, kind = mapping
                break
        payload = schemas.ErrorPayload(kind=kind, message=str(exc))
        return JSONResponse(status_code=status, content={"error": payload.model_dump()})

    @app.get("/healthz", response_model=schemas.HealthResponse)
    def healthz():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/gen-data", response_model=schemas.GenDataResponse)
    def gen_data(req: schemas.GenDataRequest):
        spec = _phantom_spec(req.phantom)
        counts = (
            req.subjects_per_class
            if isinstance(req.subjects_per_class, int)
            else tuple(req.subjects_per_class)
        )
        dataset = phantoms.generate_dataset(
            spec,
            subjects_per_class=counts,
            test_fraction=req.test_fraction,
            seed=req.seed,
            confounder=req.confounder,
        )
        manifest = datastore.save_dataset(dataset, req.out_dir)
        return schemas.GenDataResponse(
            manifest=manifest,
            subjects=len(dataset.subjects),
            train=len(dataset.train_subjects()),
            test=len(dataset.test_subjects()),
        )

    @app.post("/register", response_model=schemas.RegisterResponse)
    def register_endpoint(req: schemas.RegisterRequest):
        moving = _read_any_volume(req.moving)
        fixed = _read_any_volume(req.fixed)
        config = registration.RegistrationConfig(**req.options.model_dump())
        result = registration.register(moving, fixed, config)
        from ..fields import write_field

        write_field(result.field, req.out_field)
        if req.cost_log:
            registration.write_cost_log(result.cost_log, req.cost_log)
        accepted = sum(1 for e in result.cost_log if e.iteration > 0)
        return schemas.RegisterResponse(
            out_field=req.out_field,
            final_cost=result.final_cost,
            converged=result.converged,
            accepted_iterations=accepted,
        )

    @app.post("/jsm", response_model=schemas.JsmResponse)
    def jsm_endpoint(req: schemas.JsmRequest):
        field = read_field(req.field)
        jsm = compute_jsm(field)
        write_volume(Volume3D(jsm.values, field.spacing), req.out)
        counts = class_counts(classify_voxels(jsm, req.flat_tol))
        if req.summary:
            with open(req.summary, "w") as fh:
                fh.write(f"flat_tol = {req.flat_tol}\n")
                for key in ("expansion", "none", "compression"):
                    fh.write(f"{key} = {counts[key]}\n")
        return schemas.JsmResponse(out=req.out, **counts)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train_endpoint(req: schemas.TrainRequest):
        dataset = datastore.load_dataset(req.dataset_dir)
        mode = _mode(req.mode)
        if req.config_file:
            config, _ = training.load_train_config(req.config_file)
            config = replace(config, seed=req.seed)
        else:
            config = _jal_config(req.options, req.seed)
        subjects = dataset.train_subjects()
        if req.oversample:
            subjects, _ = phantoms.adasyn_oversample(subjects, seed=config.seed)
        result = training.train(datastore.to_samples(subjects), mode, config)

        os.makedirs(req.out_dir, exist_ok=True)
        model_files = _model_paths(req.out_dir, mode)
        for params, path in zip(result.models, model_files):
            nn.save_model(params, path)
        history_files = []
        for i, hist in enumerate(result.histories, start=1):
            path = os.path.join(req.out_dir, f"history_{mode.value}_{i}.csv")
            hist.write_csv(path)
            history_files.append(path)
        training.write_train_config(
            os.path.join(req.out_dir, "train_config.ini"), config,
            data={"dataset_dir": req.dataset_dir, "mode": mode.value},
        )
        return schemas.TrainResponse(
            model_files=model_files,
            history_files=history_files,
            final_train_accuracy=float(np.mean([h.accuracy[-1] for h in result.histories])),
            final_total_loss=float(np.mean([h.total[-1] for h in result.histories])),
        )

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_endpoint(req: schemas.EvalRequest):
        dataset = datastore.load_dataset(req.dataset_dir)
        mode = _mode(req.mode)
        result = _load_result(req.model_dir, mode)
        subjects = (
            dataset.test_subjects() if req.split == "test" else dataset.train_subjects()
        )
        if not subjects:
            raise InputError(f"no subjects in split {req.split!r}")
        preds = evaluation.predict_subjects(result, subjects)
        labels = np.array([s.label for s in subjects])
        metrics = evaluation.per_class_metrics(evaluation.confusion(preds, labels, 4))
        if req.out_dir:
            os.makedirs(req.out_dir, exist_ok=True)
            import json

            with open(os.path.join(req.out_dir, f"metrics_{mode.value}.json"), "w") as fh:
                json.dump(metrics.to_dict(), fh, indent=2)
        payload = metrics.to_dict()
        return schemas.EvalResponse(
            metrics=schemas.MetricsPayload(**payload), samples=len(subjects)
        )

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate_endpoint(req: schemas.AblateRequest):
        dataset = datastore.load_dataset(req.dataset_dir)
        os.makedirs(req.out_dir, exist_ok=True)
        config = _jal_config(req.options, req.seed)
        sweep_file = None
        if req.sweep_lambdas:
            sweep_file = os.path.join(req.out_dir, "lambda_sweep.csv")
            _run_sweep(dataset, req, config, sweep_file)
        summaries = []
        for mode_name in req.modes:
            mode = _mode(mode_name)
            report = evaluation.ablate(dataset, mode, config)
            evaluation.write_ablation_report(report, req.out_dir)
            summaries.append(
                schemas.AblationSummary(
                    mode=mode.value,
                    with_jal=schemas.AblationArmPayload(
                        macro_accuracy=report.with_jal.metrics.macro_accuracy,
                        debug_gradient_fraction=report.with_jal.debug_gradient_fraction,
                    ),
                    without_jal=schemas.AblationArmPayload(
                        macro_accuracy=report.without_jal.metrics.macro_accuracy,
                        debug_gradient_fraction=report.without_jal.debug_gradient_fraction,
                    ),
                    report_file=os.path.join(req.out_dir, f"ablation_{mode.value}.json"),
                )
            )
        return schemas.AblateResponse(reports=summaries, sweep_file=sweep_file)

    @app.post("/explain", response_model=schemas.ExplainResponse)
    def explain_endpoint(req: schemas.ExplainRequest):
        dataset = datastore.load_dataset(req.dataset_dir)
        mode = _mode(req.mode)
        result = _load_result(req.model_dir, mode)
        match = [s for s in dataset.subjects if s.subject_id == req.subject_id]
        if not match:
            raise InputError(f"subject {req.subject_id!r} not in dataset")
        summary = evaluation.export_saliency(result, match[0], req.out_dir)
        files = sorted(
            f for f in os.listdir(req.out_dir) if f.startswith(req.subject_id)
        )
        corrs = {
            name: data["rank_correlation_vs_deformation"]
            for name, data in summary["modalities"].items()
        }
        return schemas.ExplainResponse(
            summary_file=os.path.join(req.out_dir, f"{req.subject_id}.summary.json"),
            files=files,
            rank_correlations=corrs,
        )

    return app


def _run_sweep(dataset, req: schemas.AblateRequest, config: JALConfig, path: str) -> None:
    """Log macro accuracy and debug-gradient mass across candidate lambdas."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["mode", "lambda", "macro_accuracy", "debug_gradient_fraction", "final_ce"]
        )
        for mode_name in req.modes:
            mode = _mode(mode_name)
            for lam in [0.0] + list(req.sweep_lambdas):
                cfg = replace(config, lam=lam)
                result = evaluation.train_arm(dataset, mode, cfg)
                outcome = evaluation.evaluate_arm(result, dataset, cfg)
                writer.writerow(
                    [
                        mode.value,
                        lam,
                        f"{outcome.metrics.macro_accuracy:.6f}",
                        f"{outcome.debug_gradient_fraction:.6f}",
                        f"{np.mean([h.ce[-1] for h in result.histories]):.6f}",
                    ]
                )
