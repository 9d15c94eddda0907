from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text, func
from sqlalchemy.orm import relationship

from .database import Base


class StudyRun(Base):
    """One rmsd-study invocation"""
    __tablename__ = "study_runs"

    id = Column(Integer, primary_key=True, index=True)
    model = Column(String(40), nullable=False)
    lattice = Column(String(40), nullable=False)  # "32x32"
    truth = Column(Text, nullable=False)  # JSON ParamSet
    seed = Column(String(24), nullable=False)  # 64-bit seeds overflow SQLite integers
    n_reps = Column(Integer, nullable=False)
    config = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now())

    estimates = relationship("EstimateRow", back_populates="study", cascade="all, delete-orphan")


class EstimateRow(Base):
    """A single method's estimate on one replicate"""
    __tablename__ = "estimates"

    id = Column(Integer, primary_key=True, index=True)
    study_id = Column(Integer, ForeignKey("study_runs.id"), nullable=False, index=True)
    design = Column(String(40), nullable=False)
    replicate_id = Column(Integer, nullable=False)
    method = Column(String(20), nullable=False)

    mu = Column(Float, nullable=True)
    sigma2 = Column(Float, nullable=True)
    lam = Column(Float, nullable=True)
    shape = Column(Float, nullable=True)
    c = Column(Float, nullable=True)
    loglik = Column(Float, nullable=True)
    wall_seconds = Column(Float, nullable=True)

    failed = Column(Boolean, default=False)
    error = Column(Text, nullable=True)

    study = relationship("StudyRun", back_populates="estimates")
