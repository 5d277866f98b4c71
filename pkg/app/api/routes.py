"""
HTTP endpoints: catalog, verification suite and weak-error ladders
"""

import logging
from importlib.metadata import PackageNotFoundError, version

from fastapi import APIRouter, HTTPException

from app.config import API_VERSION, ENVIRONMENT, LEVY_CATALOG, MODEL_CATALOG, ORACLES, TEST_FUNCTION_CATALOG
from app.models import (
    APIInfo, CatalogResponse, ConvergeRequest, ExperimentConfig,
    HealthResponse, VerificationReport, WeakErrorReport,
)
from app.services.experiment_service import ExperimentService
from app.services.montecarlo_service import ExperimentInvalidError

logger = logging.getLogger(__name__)

router = APIRouter()

ENDPOINTS = {"catalog": "/catalog", "verify": "/verify", "converge": "/converge", "health": "/health"}
NUMERIC_STACK = ("numpy", "scipy", "pandas")


def _fail(action: str, exc: Exception) -> HTTPException:
    if isinstance(exc, ValueError):
        return HTTPException(status_code=400, detail=str(exc))
    if isinstance(exc, ExperimentInvalidError):
        return HTTPException(status_code=422, detail=str(exc))
    logger.error(f"{action} failed: {exc}", exc_info=True)
    return HTTPException(status_code=500, detail=f"{action} failed: {exc}")


@router.get("/", response_model=APIInfo)
async def root():
    return APIInfo(
        message="Marcus Wong-Zakai Weak Convergence API",
        version=API_VERSION,
        endpoints=ENDPOINTS,
        documentation={"interactive_docs": "/docs", "redoc": "/redoc", "openapi_json": "/openapi.json"},
    )


@router.get("/health", response_model=HealthResponse)
async def health():
    """Report the numeric stack versions; 503 if one of them is missing."""
    try:
        dependencies = {name: version(name) for name in NUMERIC_STACK}
    except PackageNotFoundError as e:
        logger.error(f"Numeric stack incomplete: {e}")
        raise HTTPException(status_code=503, detail=f"Missing package: {e}")
    dependencies["environment"] = ENVIRONMENT
    return HealthResponse(status="healthy", message="Ready for experiments", version=API_VERSION,
                          dependencies=dependencies)


@router.get("/catalog", response_model=CatalogResponse)
async def catalog():
    """Builtin coefficient models, Levy families, test functions and oracles."""
    return CatalogResponse(models=MODEL_CATALOG, levy_families=LEVY_CATALOG,
                           test_functions=TEST_FUNCTION_CATALOG, oracles=list(ORACLES))


@router.post("/verify", response_model=VerificationReport)
def verify(config: ExperimentConfig):
    """Run the verification suite for a config without writing files."""
    logger.info(f"POST /verify {config.model.name}/{config.levy.family}")
    try:
        return ExperimentService().run_verification(config, write_files=False)
    except Exception as e:
        raise _fail("Verification", e)


@router.post("/converge", response_model=WeakErrorReport)
def converge(request: ConvergeRequest):
    config = request.config
    logger.info(f"POST /converge {config.model.name}/{config.levy.family}, {request.workers} worker(s)")
    try:
        service = ExperimentService(workers=request.workers, reproducible=request.reproducible)
        return service.run_convergence(config, write_files=request.write_files)
    except Exception as e:
        raise _fail("Convergence run", e)
