"""
FastAPI application exposing the verification suite and the convergence runs
"""

from contextlib import asynccontextmanager
import logging
import os
from pathlib import Path

from dotenv import load_dotenv
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

# start.py reads .env itself; this covers `uvicorn app.main:app` in development
if os.getenv("ENVIRONMENT", "development") == "development" and Path(".env").is_file():
    load_dotenv(".env")

from app.config import API_TITLE, API_DESCRIPTION, API_VERSION, ENVIRONMENT, setup_logging  # noqa: E402
from app.models import ErrorResponse  # noqa: E402
from app.api.routes import router  # noqa: E402

setup_logging()
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"{API_TITLE} v{API_VERSION} up ({ENVIRONMENT})")
    yield
    logger.info(f"{API_TITLE} stopped")


app = FastAPI(title=API_TITLE, description=API_DESCRIPTION, version=API_VERSION, lifespan=lifespan)
app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["GET", "POST"], allow_headers=["*"])
app.include_router(router)


@app.exception_handler(Exception)
async def unhandled_error(request: Request, exc: Exception):
    logger.error(f"{request.method} {request.url.path} raised {type(exc).__name__}: {exc}", exc_info=True)
    body = ErrorResponse(
        error=type(exc).__name__,
        message="Internal error while serving the request",
        detail=str(exc) if ENVIRONMENT == "development" else None,
    )
    return JSONResponse(status_code=500, content=body.model_dump(mode="json"))
