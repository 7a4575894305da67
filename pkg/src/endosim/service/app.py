"""FastAPI wrapper exposing the simulator as a small service."""
from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from . import api
from .models import (
    AttacksRequest,
    AttacksResponse,
    FuzzRequest,
    FuzzResponse,
    HealthResponse,
    InterleaveRequest,
    MonteCarloRequest,
    MonteCarloResponse,
    RunRequest,
    RunResponse,
    ScenariosResponse,
    VariantsResponse,
)


def create_app() -> FastAPI:
    app = FastAPI(title="endosim", version=__version__)

    def guard(fn, *args):
        try:
            return fn(*args)
        except api.ServiceError as exc:
            raise HTTPException(status_code=exc.status_code, detail=exc.detail) from exc

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return api.health()

    @app.get("/variants", response_model=VariantsResponse)
    def variants() -> VariantsResponse:
        return api.variants()

    @app.get("/scenarios", response_model=ScenariosResponse)
    def scenarios() -> ScenariosResponse:
        return api.scenarios()

    @app.post("/run", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        return guard(api.run, req)

    @app.post("/attacks", response_model=AttacksResponse)
    def attacks(req: AttacksRequest) -> AttacksResponse:
        return guard(api.attacks, req)

    @app.post("/montecarlo", response_model=MonteCarloResponse)
    def montecarlo(req: MonteCarloRequest) -> MonteCarloResponse:
        return guard(api.montecarlo, req)

    @app.post("/interleave", response_model=RunResponse)
    def interleave(req: InterleaveRequest) -> RunResponse:
        return guard(api.interleave, req)

    @app.post("/fuzz", response_model=FuzzResponse)
    def fuzz(req: FuzzRequest) -> FuzzResponse:
        return guard(api.fuzz, req)

    return app


app = create_app()
