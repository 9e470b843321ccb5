"""FastAPI application exposing the pipeline stages.

Error mapping: configuration problems (including a missing credential
variable) answer 422, bad or missing input data answers 400, and
gateway/backend failures answer 502. Every error body carries a
human-readable message plus the full violation list when there is one.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import ConfigError, load_config
from ..gateway import GatewayConfigError, GatewayError
from ..pipeline import DATA_ERRORS, STAGES, StageResult
from ..prompting import OptimizationAborted
from .schemas import HealthResponse, StageRequest, StageResponse


def _run_stage(stage: str, req: StageRequest) -> StageResponse:
    cfg = load_config(req.config_path, req.overrides)
    base_dir = Path(req.config_path).parent.resolve() if req.config_path else Path.cwd()
    result: StageResult = STAGES[stage](cfg, base_dir)
    return StageResponse(
        command=result.command,
        out_dir=str(result.out_dir),
        outputs=list(result.outputs),
        manifest_path=str(result.manifest_path),
        summary=result.summary,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="trajscope", version=__version__)

    @app.exception_handler(ConfigError)
    async def config_error(request: Request, exc: ConfigError) -> JSONResponse:
        return JSONResponse(
            status_code=422,
            content={"error": "configuration invalid", "violations": exc.violations},
        )

    @app.exception_handler(GatewayConfigError)
    async def gateway_config_error(request: Request, exc: GatewayConfigError) -> JSONResponse:
        return JSONResponse(
            status_code=422,
            content={"error": str(exc), "violations": [str(exc)]},
        )

    for klass in DATA_ERRORS:

        @app.exception_handler(klass)
        async def data_error(request: Request, exc: Exception) -> JSONResponse:
            return JSONResponse(status_code=400, content={"error": str(exc), "violations": []})

    @app.exception_handler(GatewayError)
    async def gateway_error(request: Request, exc: GatewayError) -> JSONResponse:
        return JSONResponse(status_code=502, content={"error": str(exc), "violations": []})

    @app.exception_handler(OptimizationAborted)
    async def optimization_aborted(request: Request, exc: OptimizationAborted) -> JSONResponse:
        return JSONResponse(status_code=502, content={"error": str(exc), "violations": []})

    @app.get("/health", response_model=HealthResponse)
    async def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/v1/segment", response_model=StageResponse)
    def segment(req: StageRequest) -> StageResponse:
        return _run_stage("segment", req)

    @app.post("/v1/assemble", response_model=StageResponse)
    def assemble(req: StageRequest) -> StageResponse:
        return _run_stage("assemble", req)

    @app.post("/v1/synth_anomalies", response_model=StageResponse)
    def synth_anomalies(req: StageRequest) -> StageResponse:
        return _run_stage("synth-anomalies", req)

    @app.post("/v1/optimize", response_model=StageResponse)
    def optimize(req: StageRequest) -> StageResponse:
        return _run_stage("optimize", req)

    @app.post("/v1/run", response_model=StageResponse)
    def run(req: StageRequest) -> StageResponse:
        return _run_stage("run", req)

    @app.post("/v1/report", response_model=StageResponse)
    def report(req: StageRequest) -> StageResponse:
        return _run_stage("report", req)

    return app
