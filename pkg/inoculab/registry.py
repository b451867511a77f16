import json
import logging
import os
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path

from sqlalchemy import select

from inoculab.db.models import Base, Run, Stage, Artifact, Metric, create_engine_from_url, create_session
from inoculab.errors import RunLockedError, StageMissingError
from inoculab.settings import TOOL_VERSION, database_url

logger = logging.getLogger(__name__)

# Какая команда производит какой этап
STAGE_COMMANDS = {
    "attack": "attack",
    "predeploy": "predeploy",
    "deploy": "deploy",
    "treat": "treat",
    "repair": "repair",
    "eval": "eval",
}


class RunRegistry:
    """Реестр одного запуска: строки в БД и зеркальный manifest.json."""

    def __init__(self, out_root, run_id: str, config_hash: str, db_url: str = None):
        self.out_root = Path(out_root)
        self.run_id = run_id
        self.config_hash = config_hash
        self.run_dir = self.out_root / run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)

        self.engine = create_engine_from_url(db_url or database_url(self.out_root))
        # Свежий sqlite-файл получает схему сразу; миграции alembic ведут ту же схему
        Base.metadata.create_all(self.engine)
        self.session_factory = create_session(self.engine)

        with self.session_factory() as session:
            with session.begin():
                run = session.execute(select(Run).where(Run.run_id == run_id)).scalar_one_or_none()
                if not run:
                    session.add(Run(run_id=run_id, config_hash=config_hash, tool_version=TOOL_VERSION))
                    logger.info(f"Registered new run {run_id} (config {config_hash[:12]})")
                elif run.config_hash != config_hash:
                    logger.warning(f"Run {run_id} was created with config {run.config_hash[:12]}, now {config_hash[:12]}")
                    run.config_hash = config_hash
        self._write_manifest()

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def stage_dir(self, stage: str) -> Path:
        path = self.run_dir / stage
        path.mkdir(parents=True, exist_ok=True)
        return path

    @contextmanager
    def lock(self):
        """Один процесс на каталог запуска."""
        lock_path = self.run_dir / ".lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"run directory {self.run_dir} is locked by another command ({lock_path})")
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock_path.unlink(missing_ok=True)

    def _run(self, session) -> Run:
        return session.execute(select(Run).where(Run.run_id == self.run_id)).scalar_one()

    def _stage(self, session, name: str):
        run = self._run(session)
        return session.execute(
            select(Stage).where(Stage.run_id == run.id, Stage.name == name)
        ).scalar_one_or_none()

    def stage_completed(self, name: str, stage_hash: str = None) -> bool:
        expected = stage_hash or self.config_hash
        with self.session_factory() as session:
            stage = self._stage(session, name)
            return bool(stage and stage.status == "done" and stage.config_hash == expected)

    def require_stage(self, name: str, stage_hash: str = None) -> Path:
        if not self.stage_completed(name, stage_hash):
            raise StageMissingError(name, STAGE_COMMANDS.get(name, name))
        return self.run_dir / name

    def begin_stage(self, name: str, force: bool = False, stage_hash: str = None) -> bool:
        """Возвращает False, если этап уже выполнен с тем же конфигом."""
        expected = stage_hash or self.config_hash
        with self.session_factory() as session:
            with session.begin():
                stage = self._stage(session, name)
                if stage and stage.status == "done" and stage.config_hash == expected and not force:
                    logger.info(f"Stage {name} already completed for config {expected[:12]}, skipping")
                    return False
                if not stage:
                    run = self._run(session)
                    stage = Stage(run_id=run.id, name=name, config_hash=expected)
                    session.add(stage)
                elif force or stage.config_hash != expected:
                    # Пересчет этапа: старые артефакты и метрики больше не принадлежат манифесту
                    self._drop_stage_rows(session, name)
                    stage.position = 0
                stage.status = "running"
                stage.config_hash = expected
                stage.started_at = datetime.utcnow()
                stage.finished_at = None
        logger.info(f"Stage {name} started")
        self._write_manifest()
        return True

    def _drop_stage_rows(self, session, name: str) -> None:
        run = self._run(session)
        for model in (Artifact, Metric):
            rows = session.execute(select(model).where(model.run_id == run.id, model.stage == name)).scalars().all()
            for row in rows:
                session.delete(row)

    def finish_stage(self, name: str) -> None:
        with self.session_factory() as session:
            with session.begin():
                stage = self._stage(session, name)
                stage.status = "done"
                stage.finished_at = datetime.utcnow()
        logger.info(f"Stage {name} finished")
        self._write_manifest()

    def stage_position(self, name: str) -> int:
        with self.session_factory() as session:
            stage = self._stage(session, name)
            return stage.position if stage else 0

    def set_stage_position(self, name: str, position: int) -> None:
        with self.session_factory() as session:
            with session.begin():
                stage = self._stage(session, name)
                stage.position = position
        self._write_manifest()

    def add_artifact(self, stage: str, kind: str, path, checkpoint=None) -> None:
        path = Path(path)
        rel = path.relative_to(self.run_dir).as_posix() if path.is_relative_to(self.run_dir) else str(path)
        with self.session_factory() as session:
            with session.begin():
                run = self._run(session)
                existing = session.execute(
                    select(Artifact).where(Artifact.run_id == run.id, Artifact.path == rel)
                ).scalar_one_or_none()
                if existing:
                    session.delete(existing)
                    session.flush()
                session.add(Artifact(
                    run_id=run.id,
                    stage=stage,
                    kind=kind,
                    path=rel,
                    checkpoint_id=checkpoint.meta.id if checkpoint is not None else None,
                    parent_checkpoint_id=checkpoint.meta.parent if checkpoint is not None else None,
                    role=checkpoint.meta.role if checkpoint is not None else None,
                ))
        self._write_manifest()

    def add_metrics(self, stage: str, records) -> None:
        with self.session_factory() as session:
            with session.begin():
                run = self._run(session)
                for record in records:
                    session.add(Metric(
                        run_id=run.id,
                        stage=stage,
                        subject=record.subject,
                        ca=record.ca,
                        asr=json.dumps(record.asr),
                        effective_asr=record.effective_asr,
                        poison_ratio=record.poison_ratio,
                        dataset=record.dataset,
                        seed=record.seed,
                    ))
        self._write_manifest()

    def lineage(self, checkpoint_id: str) -> list:
        """Цепочка checkpoint_id от указанного до корня."""
        chain = []
        with self.session_factory() as session:
            current = checkpoint_id
            while current is not None and current not in chain:
                chain.append(current)
                row = session.execute(
                    select(Artifact).where(Artifact.checkpoint_id == current)
                ).scalars().first()
                current = row.parent_checkpoint_id if row else None
        return chain

    def manifest(self) -> dict:
        with self.session_factory() as session:
            run = self._run(session)
            stages = {}
            for stage in sorted(run.stages, key=lambda s: s.name):
                stages[stage.name] = {
                    "status": stage.status,
                    "config_hash": stage.config_hash,
                    "position": stage.position,
                    "started_at": stage.started_at.isoformat() if stage.started_at else None,
                    "finished_at": stage.finished_at.isoformat() if stage.finished_at else None,
                    "checkpoints": {},
                    "artifacts": [],
                }
            for artifact in sorted(run.artifacts, key=lambda a: a.path):
                entry = stages.setdefault(artifact.stage, {"artifacts": [], "checkpoints": {}})
                entry["artifacts"].append({"kind": artifact.kind, "path": artifact.path})
                if artifact.checkpoint_id:
                    entry["checkpoints"][artifact.path] = {
                        "id": artifact.checkpoint_id,
                        "parent": artifact.parent_checkpoint_id,
                        "role": artifact.role,
                    }
            return {
                "run_id": run.run_id,
                "config_hash": run.config_hash,
                "tool_version": run.tool_version,
                "created_at": run.created_at.isoformat() if run.created_at else None,
                "stages": stages,
            }

    def _write_manifest(self) -> None:
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        tmp.replace(self.manifest_path)

    def close(self) -> None:
        self.engine.dispose()
