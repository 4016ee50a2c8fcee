"""FastAPI application exposing the OCT-A pipeline as background jobs."""

import logging

from fastapi import FastAPI
from prometheus_client import make_asgi_app

from octa.config import settings
from octa.models import HealthResponse
from octa.routers import jobs

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper()),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)

logger = logging.getLogger(__name__)

app = FastAPI(
    title="OCT-A Quantification API",
    description="Vessel segmentation, FAZ morphometry and cohort statistics for en-face OCT-A",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc",
)

app.include_router(jobs.router)
app.mount("/metrics", make_asgi_app())


@app.get("/health", response_model=HealthResponse)
async def health_check() -> HealthResponse:
    """
    Health check endpoint.

    Returns:
        HealthResponse indicating API is healthy
    """
    return HealthResponse(status="healthy")


@app.on_event("startup")
async def startup_event():
    logger.info("=" * 60)
    logger.info("OCT-A Quantification API starting...")
    logger.info(f"Output directory: {settings.output_dir}")
    logger.info(f"Inference batch: {settings.inference_batch}")
    logger.info(f"Log Level: {settings.log_level}")
    logger.info("=" * 60)


@app.on_event("shutdown")
async def shutdown_event():
    logger.info("OCT-A Quantification API shutting down...")


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "octa.main:app",
        host=settings.api_host,
        port=settings.api_port,
        log_level=settings.log_level.lower(),
    )
