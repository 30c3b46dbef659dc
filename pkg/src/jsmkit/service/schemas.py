"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class PhantomOptions(BaseModel):
    dims: int = 16
    template_blobs: int = 6
    noise_sigma: float = 0.02
    amplitudes: list[float] | None = None
    individual_sigma: float = 0.25
    marker_size: int = 2
    marker_levels: list[float] | None = None
    confound_train: bool = True
    template_seed: int = 0


class GenDataRequest(BaseModel):
    out_dir: str
    seed: int = 0
    subjects_per_class: int | list[int] = 40
    test_fraction: float = Field(default=0.25, gt=0.0, lt=1.0)
    confounder: bool = True
    phantom: PhantomOptions = PhantomOptions()


class GenDataResponse(BaseModel):
    manifest: str
    subjects: int
    train: int
    test: int


class RegistrationOptions(BaseModel):
    alpha: float = 0.1
    bins: int = 32
    levels: int = 3
    step: float = 1.0
    max_iters: int = 100
    smooth_sigma: float = 1.0
    tol: float = 1e-6


class RegisterRequest(BaseModel):
    moving: str
    fixed: str
    out_field: str
    cost_log: str | None = None
    options: RegistrationOptions = RegistrationOptions()


class RegisterResponse(BaseModel):
    out_field: str
    final_cost: float
    converged: bool
    accepted_iterations: int


class JsmRequest(BaseModel):
    field: str
    out: str
    flat_tol: float = Field(default=0.02, ge=0.0)
    summary: str | None = None


class JsmResponse(BaseModel):
    out: str
    expansion: int
    none: int
    compression: int


class TrainOptions(BaseModel):
    lam: float = Field(default=1.0, alias="lambda", ge=0.0)
    feature_weight: float = 0.8
    debug_weight: float = 0.2
    flat_tol: float = 0.02
    epochs: int = 20
    batch_size: int = 10
    learning_rate: float = 0.01
    activation: str = "softplus"
    beta: float = 10.0
    channels: list[int] = [4, 8]

    model_config = {"populate_by_name": True}


class TrainRequest(BaseModel):
    dataset_dir: str
    mode: str = "early"
    out_dir: str
    seed: int = 0
    config_file: str | None = None
    options: TrainOptions = TrainOptions()
    oversample: bool = True


class TrainResponse(BaseModel):
    model_files: list[str]
    history_files: list[str]
    final_train_accuracy: float
    final_total_loss: float


class EvalRequest(BaseModel):
    dataset_dir: str
    model_dir: str
    mode: str = "early"
    out_dir: str | None = None
    split: str = "test"


class MetricsPayload(BaseModel):
    per_class: dict
    macro: dict


class EvalResponse(BaseModel):
    metrics: MetricsPayload
    samples: int


class AblateRequest(BaseModel):
    dataset_dir: str
    out_dir: str
    modes: list[str] = ["early", "late"]
    seed: int = 0
    options: TrainOptions = TrainOptions()
    sweep_lambdas: list[float] | None = None


class AblationArmPayload(BaseModel):
    macro_accuracy: float
    debug_gradient_fraction: float


class AblationSummary(BaseModel):
    mode: str
    with_jal: AblationArmPayload
    without_jal: AblationArmPayload
    report_file: str


class AblateResponse(BaseModel):
    reports: list[AblationSummary]
    sweep_file: str | None = None


class ExplainRequest(BaseModel):
    dataset_dir: str
    model_dir: str
    mode: str = "early"
    subject_id: str
    out_dir: str


class ExplainResponse(BaseModel):
    summary_file: str
    files: list[str]
    rank_correlations: dict[str, float]


class ErrorPayload(BaseModel):
    kind: str
    message: str
