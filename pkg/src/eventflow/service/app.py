"""HTTP front end over the eventflow package."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..checkpoint import Checkpoint, load_checkpoint
from ..harness import forecast_metrics
from ..metrics import mmd, sequence_distance
from ..sampling import Forecast, ForecastRecord, sample
from ..sequences import EventSequence
from ..synthetic import SimulatorSpec, simulate
from .schemas import (
    DistanceRequest,
    EvaluateForecastsRequest,
    ForecastRequest,
    MetricReport,
    MMDRequest,
    SampleRequest,
    SamplesResponse,
    SequenceRecord,
    SimulateRequest,
    SimulateResponse,
)

app = FastAPI(title="eventflow", version=__version__)


@lru_cache(maxsize=8)
def _checkpoint(path: str) -> Checkpoint:
    return load_checkpoint(path)


def _records(seqs) -> list[SequenceRecord]:
    return [SequenceRecord(**s.to_record()) for s in seqs]


def _sequences(records: list[SequenceRecord]) -> list[EventSequence]:
    return [EventSequence.from_raw(r.events, r.t_max) for r in records]


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/simulate", response_model=SimulateResponse)
def simulate_endpoint(req: SimulateRequest):
    try:
        spec = SimulatorSpec(req.kind, req.params, req.t_max)
    except ValueError as e:
        raise HTTPException(422, str(e))
    ds = simulate(spec, req.n, req.seed)
    return SimulateResponse(kind=req.kind, seed=req.seed, sequences=_records(ds))


@app.post("/distance", response_model=MetricReport)
def distance_endpoint(req: DistanceRequest):
    try:
        d = sequence_distance(np.sort(req.a), np.sort(req.b), req.t_end)
    except ValueError as e:
        raise HTTPException(422, str(e))
    if req.normalize_by:
        d /= req.normalize_by
    return MetricReport(metric="distance", value=d, n_pairs=1)


@app.post("/mmd", response_model=MetricReport)
def mmd_endpoint(req: MMDRequest):
    try:
        a, b = _sequences(req.a), _sequences(req.b)
    except ValueError as e:
        raise HTTPException(422, str(e))
    t_end = req.t_end or max(s.support_end for s in a + b)
    return MetricReport(metric="mmd", value=mmd(a, b, t_end), n_pairs=len(a) * len(b))


@app.post("/evaluate/forecasts", response_model=MetricReport)
def evaluate_forecasts(req: EvaluateForecastsRequest):
    records = [ForecastRecord.from_record(r.model_dump()) for r in req.records]
    try:
        out = forecast_metrics(records, [req.metric])[req.metric]
    except ValueError as e:
        raise HTTPException(422, str(e))
    return MetricReport(metric=req.metric, **out)


def _load(path: str) -> Checkpoint:
    try:
        return _checkpoint(path)
    except FileNotFoundError as e:
        raise HTTPException(404, str(e))


@app.post("/sample", response_model=SamplesResponse)
def sample_endpoint(req: SampleRequest):
    ckpt = _load(req.ckpt)
    if ckpt.task != "unconditional":
        raise HTTPException(422, "checkpoint is not an unconditional model")
    seqs = sample(ckpt, req.n, req.nfe, np.random.default_rng(req.seed))
    return SamplesResponse(sequences=_records(seqs))


@app.post("/forecast", response_model=SamplesResponse)
def forecast_endpoint(req: ForecastRequest):
    ckpt, count = _load(req.ckpt), _load(req.count_ckpt)
    if ckpt.task != "forecast":
        raise HTTPException(422, "checkpoint is not a forecast model")
    mode = Forecast(np.sort(np.asarray(req.history, dtype=np.float64)), req.t0)
    seqs = sample(ckpt, req.n, req.nfe, np.random.default_rng(req.seed), mode, count)
    return SamplesResponse(sequences=_records(seqs))
