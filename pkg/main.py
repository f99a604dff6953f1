"""FastAPI application exposing the strategy search."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from app.errors import ParaSearchError
from app.fixtures import available_fixtures
from app.schemas import SearchSettings
from app.search import run_search

app = FastAPI(
    title="ParaSearch API",
    version="1.0.0",
    description="Throughput- and money-optimal hybrid-parallel training strategies by analytical simulation.",
)


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    """Convert Pydantic validation errors into 400 responses."""
    details = exc.errors()
    for error in details:
        ctx = error.get("ctx")
        if ctx and "error" in ctx:
            ctx["error"] = str(ctx["error"])
    return JSONResponse(
        status_code=400,
        content={
            "error": "Invalid payload. Check the submitted fields.",
            "code": "INVALID_PAYLOAD",
            "details": details,
        },
    )


@app.exception_handler(ParaSearchError)
async def search_error_handler(request: Request, exc: ParaSearchError):
    return JSONResponse(
        status_code=422,
        content={"error": exc.message, "code": exc.code, "module": exc.module, "entity": exc.entity},
    )


@app.get("/fixtures")
def list_fixtures():
    return {"fixtures": available_fixtures()}


@app.post("/search")
def search_endpoint(settings: SearchSettings):
    """Run one search; the worker count is forced to 1 inside the server process."""
    report = run_search(settings.model_copy(update={"workers": 1}))
    body = report.to_dict(include_timings=True)
    body["exit_code"] = report.exit_code
    return body
