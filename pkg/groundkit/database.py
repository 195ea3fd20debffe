"""On-disk cache of LLM responses, keyed by (backend id, query hash)."""
from sqlalchemy import create_engine, Column, Integer, String, Text, DateTime, UniqueConstraint
from sqlalchemy.orm import declarative_base, sessionmaker
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional
import hashlib
import logging
import threading

logger = logging.getLogger(__name__)

Base = declarative_base()


class CachedResponse(Base):
    __tablename__ = "llm_responses"
    __table_args__ = (UniqueConstraint("backend_id", "query_hash", name="uq_backend_query"),)

    id = Column(Integer, primary_key=True, index=True)
    backend_id = Column(String, nullable=False, index=True)
    query_hash = Column(String, nullable=False, index=True)
    query = Column(Text, nullable=False)
    response = Column(Text, nullable=False)
    created_at = Column(DateTime, nullable=False)


def query_hash(query: str) -> str:
    return hashlib.sha256(query.encode("utf-8")).hexdigest()


class ResponseCache:
    """SQLite-backed response cache; writes are serialized by a lock."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(
            f"sqlite:///{self.path}", connect_args={"check_same_thread": False}
        )
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        self._write_lock = threading.Lock()
        init_db(self.engine)

    def get(self, backend_id: str, query: str) -> Optional[CachedResponse]:
        db = self.SessionLocal()
        try:
            row = db.query(CachedResponse).filter(
                CachedResponse.backend_id == backend_id,
                CachedResponse.query_hash == query_hash(query),
            ).first()
            if row is not None:
                db.expunge(row)
            return row
        finally:
            db.close()

    def put(self, backend_id: str, query: str, response: str) -> CachedResponse:
        """Store a response; the last writer for a key wins."""
        with self._write_lock:
            db = self.SessionLocal()
            try:
                row = db.query(CachedResponse).filter(
                    CachedResponse.backend_id == backend_id,
                    CachedResponse.query_hash == query_hash(query),
                ).first()
                if row is None:
                    row = CachedResponse(backend_id=backend_id, query_hash=query_hash(query), query=query)
                    db.add(row)
                row.response = response
                row.created_at = datetime.now(timezone.utc).replace(tzinfo=None, microsecond=0)
                db.commit()
                db.refresh(row)
                db.expunge(row)
                return row
            finally:
                db.close()

    def count(self) -> int:
        db = self.SessionLocal()
        try:
            return db.query(CachedResponse).count()
        finally:
            db.close()


def init_db(engine):
    Base.metadata.create_all(bind=engine)
    logger.debug("Response cache tables ready at %s", engine.url)
