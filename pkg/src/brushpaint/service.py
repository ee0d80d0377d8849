"""HTTP service exposing the backends and every pipeline stage."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__, ops
from .errors import BrushpaintError

STATUS_FOR_EXIT = {1: 400, 2: 422, 3: 500}

app = FastAPI(title="brushpaint", version=__version__)


@app.exception_handler(BrushpaintError)
async def _domain_error(request: Request, exc: BrushpaintError):
    body = {"error": type(exc).__name__, "detail": str(exc), "exit_code": exc.exit_code}
    if getattr(exc, "diagnostics", None):
        body["diagnostics"] = exc.diagnostics
    return JSONResponse(status_code=STATUS_FOR_EXIT.get(exc.exit_code, 500), content=body)


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/segment", response_model=ops.SegmentResponse)
def segment(req: ops.SegmentRequest) -> ops.SegmentResponse:
    return ops.segment(req)


@app.post("/caption", response_model=ops.CaptionResponse)
def caption(req: ops.CaptionRequest) -> ops.CaptionResponse:
    return ops.caption(req)


@app.post("/annotate", response_model=ops.AnnotateResponse)
def annotate(req: ops.AnnotateRequest) -> ops.AnnotateResponse:
    return ops.annotate(req)


@app.post("/pretrain", response_model=ops.TrainResponse)
def pretrain(req: ops.PretrainRequest) -> ops.TrainResponse:
    return ops.pretrain(req)


@app.post("/train", response_model=ops.TrainResponse)
def train(req: ops.TrainRequest) -> ops.TrainResponse:
    return ops.train(req)


@app.post("/sample", response_model=ops.SampleResponse)
def sample(req: ops.SampleRequest) -> ops.SampleResponse:
    return ops.sample_one(req)


@app.post("/eval", response_model=ops.EvalResponse)
def evaluate(req: ops.EvalRequest) -> ops.EvalResponse:
    return ops.run_eval(req)
