"""
Experiment registry: training and evaluation runs with their loss curves and metric summaries
"""

import json
import logging
from datetime import datetime
from typing import Iterable, List, Optional

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import Session, declarative_base, relationship, sessionmaker

from config import REGISTRY_URL

logger = logging.getLogger(__name__)

Base = declarative_base()

engine = None
SessionLocal = None


def configure_registry(url: str = REGISTRY_URL) -> None:
    """(Re)bind the module engine and session factory to `url`"""
    global engine, SessionLocal
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    engine = create_engine(url, connect_args=connect_args)
    SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


configure_registry(REGISTRY_URL)


# Registry models
class Run(Base):
    """One train or eval invocation"""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, nullable=False)  # train, eval
    status = Column(String, default="completed")
    data_dir = Column(String, nullable=False)
    split = Column(String, nullable=True)
    checkpoint = Column(String, nullable=True)
    config = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    losses = relationship("EpochLoss", back_populates="run", order_by="EpochLoss.epoch",
                          cascade="all, delete-orphan")
    summaries = relationship("MethodSummary", back_populates="run", cascade="all, delete-orphan")


class EpochLoss(Base):
    __tablename__ = "epoch_losses"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    epoch = Column(Integer, nullable=False)
    mean_loss = Column(Float, nullable=False)

    run = relationship("Run", back_populates="losses")


class MethodSummary(Base):
    """Aggregate metrics of one method (model or CFAR threshold) in an eval run"""
    __tablename__ = "method_summaries"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    method = Column(String, nullable=False)
    n_pairs = Column(Integer, nullable=False)
    n_missing = Column(Integer, nullable=False)
    median_chamfer = Column(Float, nullable=True)
    median_mod_hausdorff = Column(Float, nullable=True)
    mean_points = Column(Float, nullable=False)

    run = relationship("Run", back_populates="summaries")


# Database dependency
def get_db():
    """Get registry session"""
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def create_tables():
    """Create all registry tables"""
    Base.metadata.create_all(bind=engine)


def record_training(db: Session, data_dir: str, checkpoint: str, config: dict,
                    losses: Iterable[float], start_epoch: int = 0) -> Run:
    run = Run(kind="train", data_dir=str(data_dir), checkpoint=str(checkpoint),
              config=json.dumps(config, sort_keys=True))
    run.losses = [EpochLoss(epoch=start_epoch + i, mean_loss=float(v)) for i, v in enumerate(losses)]
    db.add(run)
    db.commit()
    db.refresh(run)
    logger.info(f"Registered training run {run.id}")
    return run


def record_evaluation(db: Session, data_dir: str, checkpoint: str, report) -> Run:
    """Store the per-method medians of a MetricsReport"""
    run = Run(kind="eval", data_dir=str(data_dir), split=report.split.value, checkpoint=str(checkpoint),
              config=json.dumps({"tau": report.tau}))
    run.summaries = [
        MethodSummary(method=m.method, n_pairs=m.n_pairs, n_missing=m.n_missing,
                      median_chamfer=m.median_chamfer, median_mod_hausdorff=m.median_mod_hausdorff,
                      mean_points=m.mean_points)
        for m in report.methods.values()
    ]
    db.add(run)
    db.commit()
    db.refresh(run)
    logger.info(f"Registered eval run {run.id} on {report.split.value}")
    return run


def list_runs(db: Session, kind: Optional[str] = None, limit: int = 100) -> List[Run]:
    query = db.query(Run)
    if kind is not None:
        query = query.filter(Run.kind == kind)
    return query.order_by(Run.id.desc()).limit(limit).all()


def get_run(db: Session, run_id: int) -> Optional[Run]:
    return db.query(Run).filter(Run.id == run_id).first()
