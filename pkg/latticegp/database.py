from pathlib import Path
from typing import Optional, Union
import logging
import os

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

# .env is loaded by the package __init__ before this module is imported
DATABASE_URL = os.getenv("LATTICEGP_DATABASE_URL")

logger = logging.getLogger(__name__)

SessionLocal = sessionmaker(autocommit=False, autoflush=False)

Base = declarative_base()

engine: Optional[Engine] = None


def ledger_url(out_dir: Union[str, Path]) -> str:
    """Environment URL if set, otherwise a SQLite file inside the run directory."""
    if DATABASE_URL:
        return DATABASE_URL
    return f"sqlite:///{Path(out_dir).resolve() / 'ledger.db'}"


def init_ledger(out_dir: Union[str, Path], url: Optional[str] = None) -> Engine:
    """Create the engine, bind the session factory and make sure the tables exist."""
    global engine
    from . import models  # noqa: F401  registers the tables on Base

    url = url or ledger_url(out_dir)
    if url.startswith("sqlite:///"):
        Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(url)
    SessionLocal.configure(bind=engine)
    Base.metadata.create_all(bind=engine)
    logger.debug("[LEDGER] using %s", url)
    return engine


# Session per unit of work
def get_db():
    if engine is None:
        raise RuntimeError("ledger is not initialised; call init_ledger first")
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
