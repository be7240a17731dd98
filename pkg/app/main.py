"""
FastAPI application for the M3FAS inference service.

This module exposes the three inference routes of a trained checkpoint
over REST. The checkpoint path comes from M3FAS_CHECKPOINT and every
inference attempt is appended to the JSONL log at M3FAS_INFERENCE_LOG.
"""

import base64
import binascii
import logging
import os
import time
from contextlib import asynccontextmanager
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from fastapi import FastAPI, HTTPException, Request, status
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from app import __version__
from app.models.network import Route
from app.models.training import InferenceLog
from app.services.channel_sim import decode_png
from app.services.checkpoint import CheckpointError
from app.services.errors import InvalidInputError, M3FASError, MissingModalityError
from app.services.run_log import RunLogService
from app.services.signal_gen import decode_wav
from app.services.trainer import LoadedModel, infer, input_hash, load_model

logger = logging.getLogger(__name__)


# ============================================================================
# Configuration
# ============================================================================

DEFAULT_LOG_PATH = "data/inference_logs.jsonl"


def checkpoint_path() -> Optional[Path]:
    value = os.environ.get("M3FAS_CHECKPOINT")
    return Path(value) if value else None


def inference_log() -> RunLogService:
    return RunLogService(os.environ.get("M3FAS_INFERENCE_LOG", DEFAULT_LOG_PATH))


# ============================================================================
# Request/Response Models
# ============================================================================

class InferRequest(BaseModel):
    """Request model for the inference endpoint"""
    route: str = Field("fusion", description="vision, acoustic or fusion (or v, a, f)")
    image_png_b64: Optional[str] = Field(None, description="Base64-encoded PNG face image")
    wav_b64: Optional[str] = Field(None, description="Base64-encoded WAV recording")
    fallback: bool = Field(False, description="Answer with the vision route if the recording fails")


class InferResponse(BaseModel):
    """Response model for the inference endpoint"""
    route: str
    scores: Dict[str, float]
    decision_score: float
    fallback: bool
    fallback_reason: Optional[str] = None
    input_hash: str


class HealthCheckResponse(BaseModel):
    """Response model for health check endpoint"""
    status: str = Field(..., description="Service status")
    timestamp: datetime = Field(default_factory=datetime.utcnow)
    version: str = Field(default=__version__)
    checkpoint: Optional[str] = None
    model_loaded: bool = False


# ============================================================================
# Model cache
# ============================================================================

class ModelRegistry:
    """Loads the checkpoint once per path."""

    def __init__(self):
        self._path: Optional[Path] = None
        self._loaded: Optional[LoadedModel] = None

    def get(self) -> LoadedModel:
        path = checkpoint_path()
        if path is None:
            raise HTTPException(
                status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
                detail="No checkpoint configured; set M3FAS_CHECKPOINT",
            )
        if self._loaded is None or self._path != path:
            self._loaded = load_model(path)
            self._path = path
            logger.info("Loaded checkpoint %s", path)
        return self._loaded

    @property
    def loaded(self) -> bool:
        return self._loaded is not None

    def clear(self) -> None:
        self._path = None
        self._loaded = None


registry = ModelRegistry()


# ============================================================================
# Application Lifecycle
# ============================================================================

@asynccontextmanager
async def lifespan(app: FastAPI):
    """Ensure the inference log exists on startup."""
    log = inference_log()
    log.ensure()
    logger.info("M3FAS inference service started; logging to %s", log.path.absolute())
    yield
    logger.info("M3FAS inference service shutting down")


# ============================================================================
# FastAPI Application
# ============================================================================

app = FastAPI(
    title="M3FAS Inference Service",
    description="REST API scoring face images and acoustic echo recordings for presentation attacks",
    version=__version__,
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# ============================================================================
# Middleware
# ============================================================================

@app.middleware("http")
async def log_requests(request: Request, call_next):
    """Log method, path, status and elapsed time of every request."""
    start_time = time.time()
    response = await call_next(request)
    processing_time = (time.time() - start_time) * 1000
    logger.info(
        "%s %s - %d - %.2fms", request.method, request.url.path, response.status_code, processing_time
    )
    return response


# ============================================================================
# API Endpoints
# ============================================================================

@app.get("/")
async def root():
    return {
        "service": "M3FAS Inference Service",
        "version": __version__,
        "endpoints": {"health": "/health", "infer": "/infer", "logs": "/logs", "stats": "/stats"},
    }


@app.get("/health", response_model=HealthCheckResponse)
async def health_check() -> HealthCheckResponse:
    path = checkpoint_path()
    return HealthCheckResponse(
        status="healthy",
        checkpoint=str(path) if path else None,
        model_loaded=registry.loaded,
    )


def _decode_b64(value: str, what: str) -> bytes:
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as e:
        raise InvalidInputError(f"{what} is not valid base64: {e}") from e


@app.post("/infer", response_model=InferResponse)
def infer_endpoint(request: InferRequest) -> InferResponse:
    """
    Score one sample on the requested route.

    Invalid inputs give 422, a missing modality 409 (with a fallback hint)
    and anything else 500. Every attempt is logged.
    """
    start_time = time.time()
    log = inference_log()
    errors: List[str] = []
    digest = ""
    try:
        try:
            route = Route.parse(request.route)
        except ValueError:
            raise InvalidInputError(f"Unknown route '{request.route}'") from None
        image = decode_png(_decode_b64(request.image_png_b64, "image_png_b64")) if request.image_png_b64 else None
        recording = decode_wav(_decode_b64(request.wav_b64, "wav_b64")) if request.wav_b64 else None
        digest = input_hash(image, recording)

        loaded = registry.get()
        result = infer(loaded, image, recording, route, fallback=request.fallback)

        log.append(
            InferenceLog(
                input_hash=digest,
                route=result.route.value,
                success=True,
                scores=result.scores,
                fallback=result.fallback,
                processing_time_ms=(time.time() - start_time) * 1000,
            )
        )
        return InferResponse(
            route=result.route.value,
            scores=result.scores,
            decision_score=result.decision_score,
            fallback=result.fallback,
            fallback_reason=result.fallback_reason,
            input_hash=digest,
        )

    except HTTPException:
        raise
    except CheckpointError as e:
        errors.append(f"Checkpoint unusable: {e}")
        status_code = status.HTTP_500_INTERNAL_SERVER_ERROR
        detail = {"errors": errors}
    except MissingModalityError as e:
        errors.append(str(e))
        status_code = status.HTTP_409_CONFLICT
        detail = {"errors": errors, "hint": "Retry with route 'vision' or set fallback=true"}
    except InvalidInputError as e:
        errors.append(str(e))
        status_code = status.HTTP_422_UNPROCESSABLE_ENTITY
        detail = {"errors": errors}
    except M3FASError as e:
        errors.append(f"Internal failure: {e}")
        status_code = status.HTTP_500_INTERNAL_SERVER_ERROR
        detail = {"errors": errors}
    except Exception as e:
        logger.exception("Unexpected inference failure")
        errors.append(f"Unexpected error: {e}")
        status_code = status.HTTP_500_INTERNAL_SERVER_ERROR
        detail = {"errors": errors}

    log.append(
        InferenceLog(
            input_hash=digest,
            route=request.route,
            success=False,
            errors=errors,
            processing_time_ms=(time.time() - start_time) * 1000,
        )
    )
    raise HTTPException(status_code=status_code, detail=detail)


@app.get("/logs")
async def get_logs(limit: int = 10) -> Dict:
    """Most recent inference log entries."""
    log = inference_log()
    entries = log.read()
    recent = entries[-limit:] if limit > 0 else []
    return {"logs": recent, "count": len(recent), "total_entries": len(entries)}


@app.get("/stats")
async def get_stats() -> Dict:
    """Inference counts, success rate, fallbacks and mean latency."""
    return inference_log().stats()


# ============================================================================
# Entry Point
# ============================================================================

if __name__ == "__main__":
    import uvicorn

    uvicorn.run("app.main:app", host="0.0.0.0", port=8000, reload=True)
