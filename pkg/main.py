"""
HTTP inference service: point clouds from radar stacks, metrics and the run registry
"""

import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import uvicorn
from fastapi import Depends, FastAPI, File, HTTPException, Query, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from sqlalchemy.orm import Session

from config import CHECKPOINT_PATH, configure_logging
from database import create_tables, get_db, get_run, list_runs
from errors import DataError, EmptyCloudError
from model import forward
from pointcloud import PointCloud2D, chamfer, mod_hausdorff, polar_to_points, threshold_image
from schemas import (HealthResponse, InferenceResponse, MetricsRequest, MetricsResponse, RunDetailResponse,
                     RunResponse)
from storage import decode_stack, load_checkpoint

logger = logging.getLogger(__name__)

app = FastAPI(title="RadarHD")
app.state.params = None
app.state.checkpoint = None

origins = [
    "http://localhost",
    "http://localhost:3000",
    "http://localhost:8000",
]

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def load_model(path: Optional[str]) -> None:
    """Load a checkpoint into the app; None unloads"""
    if path is None:
        app.state.params, app.state.checkpoint = None, None
        return
    app.state.params = load_checkpoint(Path(path)).params
    app.state.checkpoint = str(path)
    logger.info(f"Model loaded from {path}")


@app.on_event("startup")
async def startup_event():
    """Create registry tables and load the configured checkpoint"""
    configure_logging()
    create_tables()
    if CHECKPOINT_PATH and app.state.params is None:
        try:
            load_model(CHECKPOINT_PATH)
        except DataError as e:
            logger.warning(f"Could not load checkpoint {CHECKPOINT_PATH}: {e}")
    logger.info("Service started")


@app.get("/health", response_model=HealthResponse)
async def health():
    return HealthResponse(status="ok", model_loaded=app.state.params is not None,
                          checkpoint=app.state.checkpoint)


@app.post("/infer", response_model=InferenceResponse)
def infer(file: UploadFile = File(...), tau: float = Query(0.5, gt=0, lt=1)):
    """Run the model on an uploaded RHD1 stack and return the thresholded point cloud"""
    params = app.state.params
    if params is None:
        raise HTTPException(status_code=503, detail="No model loaded")
    try:
        stack = decode_stack(file.file.read())
        probability = forward(params, stack)
    except DataError as e:
        raise HTTPException(status_code=400, detail=str(e))

    binary = threshold_image(probability, tau)
    cloud = polar_to_points(binary)
    return InferenceResponse(
        n_range=binary.n_range,
        n_azimuth=binary.n_azimuth,
        tau=tau,
        occupied_fraction=float(binary.data.mean()),
        points=cloud.points.tolist(),
    )


@app.post("/metrics", response_model=MetricsResponse)
async def metrics(request: MetricsRequest):
    """Chamfer and modified Hausdorff distance between two 2D clouds"""
    try:
        a = PointCloud2D.of(np.asarray(request.a, dtype=np.float64))
        b = PointCloud2D.of(np.asarray(request.b, dtype=np.float64))
        return MetricsResponse(chamfer=chamfer(a, b), mod_hausdorff=mod_hausdorff(a, b))
    except EmptyCloudError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except ValueError as e:
        raise HTTPException(status_code=400, detail=f"points must be [x, y] pairs: {e}")


@app.get("/runs", response_model=List[RunResponse])
async def runs(kind: Optional[str] = None, limit: int = Query(100, ge=1, le=1000), db: Session = Depends(get_db)):
    return list_runs(db, kind, limit)


@app.get("/runs/{run_id}", response_model=RunDetailResponse)
async def run_detail(run_id: int, db: Session = Depends(get_db)):
    run = get_run(db, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run


if __name__ == "__main__":
    uvicorn.run("main:app", host="0.0.0.0", port=8000, reload=True)
