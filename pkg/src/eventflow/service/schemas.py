from __future__ import annotations

from pydantic import BaseModel, Field, model_validator


class SequenceRecord(BaseModel):
    events: list[float]
    t_max: float = Field(gt=0)


class SimulateRequest(BaseModel):
    kind: str
    n: int = Field(default=100, ge=1, le=100_000)
    t_max: float = Field(default=100.0, gt=0)
    seed: int = 0
    params: dict[str, float] = Field(default_factory=dict)


class SimulateResponse(BaseModel):
    kind: str
    seed: int
    sequences: list[SequenceRecord]


class DistanceRequest(BaseModel):
    a: list[float]
    b: list[float]
    t_end: float = Field(gt=0)
    normalize_by: float | None = Field(default=None, gt=0)


class MMDRequest(BaseModel):
    a: list[SequenceRecord] = Field(min_length=1)
    b: list[SequenceRecord] = Field(min_length=1)
    t_end: float | None = Field(default=None, gt=0)


class MetricReport(BaseModel):
    metric: str
    value: float
    std_over_seeds: float | None = None
    n_pairs: int
    excluded: int = 0


class SampleRequest(BaseModel):
    ckpt: str
    n: int = Field(default=100, ge=1, le=100_000)
    nfe: int = Field(default=25, ge=1)
    seed: int = 0


class ForecastRequest(BaseModel):
    ckpt: str
    count_ckpt: str
    history: list[float] = Field(default_factory=list)
    t0: float
    n: int = Field(default=1, ge=1, le=10_000)
    nfe: int = Field(default=25, ge=1)
    seed: int = 0


class ForecastRecordModel(BaseModel):
    history: list[float]
    t0: float
    dt: float = Field(gt=0)
    truth: list[float]
    generated: list[float]
    sequence_index: int = -1


class EvaluateForecastsRequest(BaseModel):
    records: list[ForecastRecordModel] = Field(min_length=1)
    metric: str = "distance"

    @model_validator(mode="after")
    def _known_metric(self):
        if self.metric not in ("distance", "mare", "mse"):
            raise ValueError(f"unknown forecast metric {self.metric!r}")
        return self


class SamplesResponse(BaseModel):
    sequences: list[SequenceRecord]
