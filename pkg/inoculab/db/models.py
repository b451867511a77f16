from datetime import datetime
from sqlalchemy import Column, Integer, String, Float, ForeignKey, DateTime, UniqueConstraint, create_engine, event
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

Base = declarative_base()

class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String, unique=True, index=True, nullable=False)
    config_hash = Column(String, nullable=False)
    tool_version = Column(String, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)

    stages = relationship("Stage", back_populates="run", cascade="all, delete-orphan")
    artifacts = relationship("Artifact", back_populates="run", cascade="all, delete-orphan")
    metrics = relationship("Metric", back_populates="run", cascade="all, delete-orphan")

class Stage(Base):
    __tablename__ = "stages"
    __table_args__ = (UniqueConstraint("run_id", "name", name="uq_stage_run_name"),)

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    name = Column(String, nullable=False)
    status = Column(String, nullable=False, default="running")
    config_hash = Column(String, nullable=False)
    # Позиция в потоке для возобновления deploy
    position = Column(Integer, nullable=False, default=0)
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    run = relationship("Run", back_populates="stages")

class Artifact(Base):
    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    stage = Column(String, nullable=False)
    kind = Column(String, nullable=False)
    path = Column(String, nullable=False)
    checkpoint_id = Column(String, nullable=True, index=True)
    parent_checkpoint_id = Column(String, nullable=True)
    role = Column(String, nullable=True)

    run = relationship("Run", back_populates="artifacts")

class Metric(Base):
    __tablename__ = "metrics"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    stage = Column(String, nullable=False)
    subject = Column(String, nullable=False)
    ca = Column(Float, nullable=False)
    asr = Column(String, nullable=False)
    effective_asr = Column(Float, nullable=True)
    poison_ratio = Column(Float, nullable=True)
    dataset = Column(String, nullable=True)
    seed = Column(Integer, nullable=True)

    run = relationship("Run", back_populates="metrics")

# Создание движка
def create_engine_from_url(url: str):
    engine = create_engine(url, echo=False)
    if url.startswith("sqlite"):
        # Для sqlite внешние ключи включаются явно
        @event.listens_for(engine, "connect")
        def _enable_foreign_keys(dbapi_connection, connection_record):
            cursor = dbapi_connection.cursor()
            cursor.execute("PRAGMA foreign_keys=ON")
            cursor.close()
    return engine

# Создание фабрики сессий
def create_session(engine):
    return sessionmaker(engine, expire_on_commit=False)
