"""Project persistence: scene files plus an append-only mutation log."""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from .errors import StageError
from .scene_io import scene_from_dict, scene_to_dict
from .staging import Scene


class UnknownProjectError(StageError):
    """No project stored under the requested id."""


class StaleRevisionError(StageError):
    """Mutation carried a revision older than the stored one."""


@dataclass(frozen=True)
class Project:
    project_id: str
    revision: int
    scene: Scene


class ProjectStore:
    """Directory-backed project store with optimistic concurrency.

    Every mutation checks the caller's revision against the stored one and
    bumps it on success; concurrent writers lose with StaleRevisionError.
    Each mutation also lands in the project's event log, making edit history
    reconstructable.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._revisions: dict[str, int] = {}
        for meta_path in self.root.glob("*/meta.json"):
            meta = json.loads(meta_path.read_text())
            self._revisions[meta["project_id"]] = int(meta["revision"])

    def _project_dir(self, project_id: str) -> Path:
        return self.root / project_id

    def _write(self, project_id: str, revision: int, scene: Scene, event: str) -> None:
        directory = self._project_dir(project_id)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "scene.json").write_text(
            json.dumps(scene_to_dict(scene), indent=2) + "\n"
        )
        (directory / "meta.json").write_text(
            json.dumps({"project_id": project_id, "revision": revision}) + "\n"
        )
        with (directory / "events.jsonl").open("a") as fh:
            fh.write(json.dumps({"event": event, "revision": revision, "ts": time.time()}) + "\n")

    def create(self, scene: Scene) -> Project:
        with self._lock:
            project_id = uuid.uuid4().hex[:10]
            self._revisions[project_id] = 1
            self._write(project_id, 1, scene, "created")
            return Project(project_id, 1, scene)

    def get(self, project_id: str) -> Project:
        with self._lock:
            if project_id not in self._revisions:
                raise UnknownProjectError(f"unknown project {project_id!r}")
            revision = self._revisions[project_id]
            payload = json.loads((self._project_dir(project_id) / "scene.json").read_text())
            return Project(project_id, revision, scene_from_dict(payload))

    def update(self, project_id: str, expected_revision: int, scene: Scene) -> Project:
        """Replace the scene; exactly one of two conflicting updates wins."""
        with self._lock:
            if project_id not in self._revisions:
                raise UnknownProjectError(f"unknown project {project_id!r}")
            current = self._revisions[project_id]
            if expected_revision != current:
                raise StaleRevisionError(
                    f"revision {expected_revision} is stale (stored: {current})"
                )
            revision = current + 1
            self._revisions[project_id] = revision
            self._write(project_id, revision, scene, "updated")
            return Project(project_id, revision, scene)

    def list_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._revisions)

    def asset_dir(self, project_id: str) -> Path:
        directory = self._project_dir(project_id) / "assets"
        directory.mkdir(parents=True, exist_ok=True)
        return directory
