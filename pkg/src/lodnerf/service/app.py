"""FastAPI application exposing the build/train/render/stats jobs.

Jobs run synchronously in the request (desk-scale workloads); failures
surface as HTTP 422 with a typed error name the CLI maps onto its exit
codes.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import LodnerfError
from . import pipeline
from . import schemas as sc


def create_app() -> FastAPI:
    app = FastAPI(title="lodnerf", version=__version__)

    @app.exception_handler(LodnerfError)
    async def _lodnerf_error(request: Request, exc: LodnerfError):
        return JSONResponse(
            status_code=422,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.exception_handler(FileNotFoundError)
    async def _missing_file(request: Request, exc: FileNotFoundError):
        return JSONResponse(
            status_code=422,
            content={"error": "ParseError", "detail": str(exc)},
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.post("/build", response_model=sc.BuildResponse)
    def build(req: sc.BuildRequest):
        return pipeline.build_tree_job(req)

    @app.post("/train", response_model=sc.TrainResponse)
    def train(req: sc.TrainRequest):
        return pipeline.train_job(req)

    @app.post("/render", response_model=sc.RenderResponse)
    def render(req: sc.RenderRequest):
        return pipeline.render_job(req)

    @app.post("/stats", response_model=sc.StatsResponse)
    def stats(req: sc.StatsRequest):
        return pipeline.stats_job(req)

    return app
