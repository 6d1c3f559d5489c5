from pydantic import BaseModel, Field
from typing import Optional


class EpochReport(BaseModel):
    phase: int = Field(..., description="Training phase (1 = cap 1.0, 2 = selected cap)")
    epoch: int = Field(..., ge=1, description="1-based epoch number")
    mean_train_loss: float = Field(..., description="Mean per-example total loss")
    mean_nll: float = Field(..., description="Mean conditioned negative log-likelihood")
    mean_kl: float = Field(..., description="Mean KL divergence")
    current_beta: float = Field(..., ge=0.0, le=1.0, description="KL weight at the end of the epoch")
    val_ndcg100: float = Field(..., description="Validation nDCG@k (k = validation_k)")
    wall_time: float = Field(0.0, description="Epoch wall time in seconds")


class MetricSummary(BaseModel):
    method: str = Field("C-VAE", description="Model label")
    protocol: str = Field(..., description="total, normal or conditioned")
    metric: str = Field(..., description="recall or ndcg")
    k: int = Field(..., ge=1, description="Cutoff")
    mean: float = Field(..., ge=0.0, le=1.0, description="Mean over cases")
    stderr: float = Field(..., ge=0.0, description="Sample standard deviation / sqrt(cases)")
    n_cases: int = Field(..., ge=1, description="Evaluation cases")

    @property
    def label(self) -> str:
        prefix = "r" if self.metric == "recall" else "n"
        return f"{prefix}@{self.k}"


class PhaseSummary(BaseModel):
    phase: int
    cap: float
    best_epoch: int
    best_score: float
    best_beta: float
    epochs_run: int
    stopped_early: bool
    checkpoint_path: Optional[str] = None
