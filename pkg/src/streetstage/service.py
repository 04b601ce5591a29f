"""HTTP API: imagery browsing, project authoring, render jobs, static UI."""

from __future__ import annotations

import math
import uuid
from contextlib import asynccontextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any

from fastapi import Body, FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import __version__
from .config import AppConfig
from .errors import StageError
from .geo import CameraPose, GeoPoint, vertical_fov_for
from .imagery import (
    BoundingBox,
    DecodeError,
    DiskCache,
    FixtureProvider,
    ImageryNode,
    ImageryService,
    MapillaryProvider,
    ProviderUnavailable,
    QuotaExceeded,
)
from .jobs import JobBundle, JobSnapshot, RenderQueue, UnknownJobError, build_bundle
from .projects import ProjectStore, StaleRevisionError, UnknownProjectError
from .render import encode_png, render_background, render_masks, write_frames
from .scene_io import SceneFormatError, scene_from_dict, scene_to_dict
from .staging import (
    DEFAULT_CAMERA_HEIGHT_M,
    DEFAULT_HORIZONTAL_FOV,
    CameraKeyframe,
    Scene,
    sample_scene,
    validate_scene,
)


def problem(status: int, title: str, detail: str) -> JSONResponse:
    return JSONResponse(
        {"type": "about:blank", "title": title, "status": status, "detail": detail},
        status_code=status,
        media_type="application/problem+json",
    )


_ERROR_STATUS: list[tuple[type, int, str]] = [
    (StaleRevisionError, 409, "stale revision"),
    (UnknownProjectError, 404, "unknown project"),
    (UnknownJobError, 404, "unknown job"),
    (QuotaExceeded, 429, "imagery quota exceeded"),
    (ProviderUnavailable, 503, "imagery unavailable"),
    (DecodeError, 502, "imagery decode failure"),
    (SceneFormatError, 422, "invalid scene"),
]


def _fail(exc: Exception) -> JSONResponse:
    for klass, status, title in _ERROR_STATUS:
        if isinstance(exc, klass):
            return problem(status, title, str(exc))
    if isinstance(exc, (StageError, ValueError)):
        return problem(422, "invalid request", str(exc))
    raise exc


def make_imagery(config: AppConfig) -> ImageryService:
    if config.provider == "fixture":
        if config.fixture_dir is None:
            raise ValueError("fixture provider needs fixture_dir")
        provider = FixtureProvider(config.fixture_dir)
    elif config.provider == "mapillary":
        provider = MapillaryProvider(token=config.provider_token)
    else:
        raise ValueError(f"unknown imagery provider {config.provider!r}")
    cache = None
    if config.cache_dir is not None:
        cache = DiskCache(config.cache_dir, config.cache_budget_bytes)
    return ImageryService(provider, cache)


def make_backend(config: AppConfig):
    from .backends import HttpBackend, MockBackend

    if config.backend == "mock":
        return MockBackend(latency_s=config.mock_latency_s)
    if config.backend == "http":
        if not config.backend_url:
            raise ValueError("http backend needs backend_url")
        return HttpBackend(config.backend_url, token=config.backend_token)
    raise ValueError(f"unknown backend {config.backend!r}")


def default_scene_for_node(node: ImageryNode) -> Scene:
    """A fresh scene staged at a node: camera at the capture point, one
    keyframe looking along the capture compass direction."""
    width, height = (1280, 720)
    camera = CameraPose(
        position=node.position,
        heading=node.compass_angle,
        pitch=0.0,
        horizontal_fov=DEFAULT_HORIZONTAL_FOV,
        vertical_fov=vertical_fov_for(DEFAULT_HORIZONTAL_FOV, width, height),
        height_above_ground=DEFAULT_CAMERA_HEIGHT_M,
    )
    keyframe = CameraKeyframe(
        time=0.0, heading=node.compass_angle, pitch=0.0, horizontal_fov=DEFAULT_HORIZONTAL_FOV
    )
    return Scene(node_id=node.node_id, camera_base=camera, keyframes=(keyframe,))


def render_bundle_for_scene(
    scene: Scene, imagery: ImageryService, job_dir: Path
) -> JobBundle:
    """Render all job inputs for a scene into job_dir and bundle them."""
    node = imagery.get_node(scene.node_id)
    pano = imagery.fetch_panorama(node)
    background_dir = job_dir / "background"
    write_frames(render_background(scene, pano), background_dir)
    mask_inputs: list[tuple[Path, str, str | None]] = []
    for index, (actor_id, mask_seq) in enumerate(render_masks(scene)):
        mask_dir = job_dir / f"mask_{index:02d}_{actor_id}"
        write_frames(mask_seq, mask_dir)
        actor = scene.actors[index]
        mask_inputs.append((mask_dir, actor.prompt_fragment, actor.reference_image))
    return build_bundle(scene, background_dir, mask_inputs)


def snapshot_to_dict(snap: JobSnapshot) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "job_id": snap.job_id,
        "state": snap.state.value,
        "bundle_id": snap.bundle_id,
        "attempts": snap.attempts,
        "error": snap.error,
        "submitted_at": snap.submitted_at,
        "started_at": snap.started_at,
        "finished_at": snap.finished_at,
        "masks": [
            {
                "index": sub.index,
                "state": sub.state.value,
                "started_at": sub.started_at,
                "finished_at": sub.finished_at,
            }
            for sub in snap.masks
        ],
        "result": None,
    }
    if snap.result_dir is not None:
        from .render import load_manifest

        manifest = load_manifest(snap.result_dir)
        payload["result"] = {
            "count": manifest["count"],
            "fps": manifest["fps"],
            "resolution": manifest["resolution"],
            "frame_url": f"/api/v1/jobs/{snap.job_id}/frames/{{k}}",
        }
    return payload


def create_app(config: AppConfig) -> FastAPI:
    imagery = make_imagery(config)
    store = ProjectStore(Path(config.workdir) / "projects")
    backend = make_backend(config)

    def resolver(payload: dict, job_dir: Path) -> JobBundle:
        return render_bundle_for_scene(scene_from_dict(payload["scene"]), imagery, job_dir)

    queue = RenderQueue(Path(config.workdir) / "queue", backend, resolver=resolver)
    queue.start()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        queue.start()
        yield
        queue.stop()

    app = FastAPI(title="streetstage", version=__version__, lifespan=lifespan)
    app.state.config = config
    app.state.imagery = imagery
    app.state.store = store
    app.state.queue = queue

    @app.exception_handler(StageError)
    async def stage_error_handler(request: Request, exc: StageError):
        return _fail(exc)

    @app.exception_handler(ValueError)
    async def value_error_handler(request: Request, exc: ValueError):
        return _fail(exc)

    # ------------------------------------------------------------- imagery

    @app.get("/api/v1/config")
    def get_config() -> dict:
        return {
            "tile_url": config.tile_url,
            "provider": config.provider,
            "version": __version__,
        }

    @app.get("/api/v1/nodes")
    def search_nodes(bbox: str, limit: int = 50) -> list[dict]:
        parts = [float(x) for x in bbox.split(",")]
        if len(parts) != 4:
            raise ValueError("bbox must be min_lon,min_lat,max_lon,max_lat")
        box = BoundingBox.from_degrees(*parts)
        return [
            {
                "node_id": n.node_id,
                "lat_deg": n.position.latitude_deg,
                "lon_deg": n.position.longitude_deg,
                "compass_angle_deg": math.degrees(n.compass_angle),
                "is_panoramic": n.is_panoramic,
                "capture_time": n.capture_time.isoformat(),
            }
            for n in imagery.search_nodes(box, limit)
        ]

    @app.get("/api/v1/nodes/{node_id}/view")
    def node_view(
        node_id: str,
        heading: float,
        pitch: float = 0.0,
        fov: float = 90.0,
        w: int = 1280,
        h: int = 720,
    ) -> Response:
        from .panorama import render_view

        node = imagery.get_node(node_id)
        pano = imagery.fetch_panorama(node)
        camera = CameraPose(
            position=node.position,
            heading=math.radians(heading),
            pitch=math.radians(pitch),
            horizontal_fov=math.radians(fov),
            vertical_fov=vertical_fov_for(math.radians(fov), w, h),
            height_above_ground=DEFAULT_CAMERA_HEIGHT_M,
        )
        frame = render_view(pano, camera, (w, h))
        return Response(content=encode_png(frame), media_type="image/png")

    # ------------------------------------------------------------ projects

    def project_payload(project) -> dict:
        return {
            "project_id": project.project_id,
            "revision": project.revision,
            "scene": scene_to_dict(project.scene),
        }

    def checked(scene: Scene) -> Scene:
        diagnostics = validate_scene(scene)
        if diagnostics:
            raise SceneFormatError("; ".join(diagnostics))
        return scene

    @app.post("/api/v1/projects", status_code=201)
    def create_project(payload: dict = Body(...)) -> dict:
        if "scene" in payload:
            scene = checked(scene_from_dict(payload["scene"]))
        elif "node_id" in payload:
            node = imagery.get_node(str(payload["node_id"]))
            scene = default_scene_for_node(node)
        else:
            raise ValueError("body must carry 'scene' or 'node_id'")
        return project_payload(store.create(scene))

    @app.get("/api/v1/projects")
    def list_projects() -> dict:
        return {"projects": store.list_ids()}

    @app.get("/api/v1/projects/{project_id}")
    def get_project(project_id: str) -> dict:
        return project_payload(store.get(project_id))

    @app.put("/api/v1/projects/{project_id}")
    def put_project(project_id: str, payload: dict = Body(...)) -> dict:
        scene = checked(scene_from_dict(payload["scene"]))
        return project_payload(store.update(project_id, int(payload["revision"]), scene))

    def mutate_scene(project_id: str, revision: int, fn) -> dict:
        project = store.get(project_id)
        scene = checked(fn(project.scene))
        return project_payload(store.update(project_id, revision, scene))

    @app.post("/api/v1/projects/{project_id}/actors")
    def add_actor(project_id: str, payload: dict = Body(...)) -> dict:
        from .scene_io import _actor_from_dict

        raw = dict(payload["actor"])
        raw.setdefault("id", f"a{uuid.uuid4().hex[:6]}")
        actor = _actor_from_dict(raw)
        result = mutate_scene(
            project_id,
            int(payload["revision"]),
            lambda scene: replace(scene, actors=scene.actors + (actor,)),
        )
        result["actor_id"] = actor.actor_id
        return result

    @app.post("/api/v1/projects/{project_id}/trajectory")
    def set_trajectory(project_id: str, payload: dict = Body(...)) -> dict:
        from .scene_io import _actor_from_dict

        actor_id = str(payload["actor_id"])

        def apply(scene: Scene) -> Scene:
            actors = []
            found = False
            for actor in scene.actors:
                if actor.actor_id != actor_id:
                    actors.append(actor)
                    continue
                found = True
                raw = payload.get("trajectory")
                base = {
                    "id": actor.actor_id,
                    "lat_deg": actor.anchor.latitude_deg,
                    "lon_deg": actor.anchor.longitude_deg,
                    "width_m": actor.width,
                    "height_m": actor.height,
                    "prompt": actor.prompt_fragment,
                    "reference_image": actor.reference_image,
                    "trajectory": raw,
                }
                if raw is not None:
                    # the sketch re-anchors the actor at its first point
                    base["lat_deg"], base["lon_deg"] = (
                        float(raw["points"][0][0]),
                        float(raw["points"][0][1]),
                    )
                actors.append(_actor_from_dict(base))
            if not found:
                raise UnknownProjectError(f"project has no actor {actor_id!r}")
            return replace(scene, actors=tuple(actors))

        return mutate_scene(project_id, int(payload["revision"]), apply)

    @app.post("/api/v1/projects/{project_id}/keyframes")
    def upsert_keyframe(project_id: str, payload: dict = Body(...)) -> dict:
        raw = payload["keyframe"]
        keyframe = CameraKeyframe(
            time=float(raw["t_s"]),
            heading=math.radians(float(raw["heading_deg"])),
            pitch=math.radians(float(raw.get("pitch_deg", 0.0))),
            horizontal_fov=math.radians(float(raw["horizontal_fov_deg"])),
        )

        def apply(scene: Scene) -> Scene:
            kept = tuple(k for k in scene.keyframes if k.time != keyframe.time)
            ordered = tuple(sorted(kept + (keyframe,), key=lambda k: k.time))
            return replace(scene, keyframes=ordered)

        return mutate_scene(project_id, int(payload["revision"]), apply)

    @app.delete("/api/v1/projects/{project_id}/keyframes")
    def delete_keyframe(project_id: str, t: float, revision: int) -> dict:
        def apply(scene: Scene) -> Scene:
            kept = tuple(k for k in scene.keyframes if k.time != t)
            if len(kept) == len(scene.keyframes):
                raise ValueError(f"no keyframe at t={t}")
            return replace(scene, keyframes=kept)

        return mutate_scene(project_id, revision, apply)

    @app.put("/api/v1/projects/{project_id}/actors/{actor_id}/reference")
    async def set_reference(project_id: str, actor_id: str, revision: int, request: Request) -> dict:
        data = await request.body()
        if not data:
            raise ValueError("empty reference image body")
        path = store.asset_dir(project_id) / f"ref_{actor_id}.bin"
        path.write_bytes(data)

        def apply(scene: Scene) -> Scene:
            actors = tuple(
                replace(a, reference_image=str(path)) if a.actor_id == actor_id else a
                for a in scene.actors
            )
            if not any(a.actor_id == actor_id for a in scene.actors):
                raise UnknownProjectError(f"project has no actor {actor_id!r}")
            return replace(scene, actors=actors)

        return mutate_scene(project_id, revision, apply)

    @app.delete("/api/v1/projects/{project_id}/actors/{actor_id}/reference")
    def clear_reference(project_id: str, actor_id: str, revision: int) -> dict:
        def apply(scene: Scene) -> Scene:
            if not any(a.actor_id == actor_id for a in scene.actors):
                raise UnknownProjectError(f"project has no actor {actor_id!r}")
            actors = tuple(
                replace(a, reference_image=None) if a.actor_id == actor_id else a
                for a in scene.actors
            )
            return replace(scene, actors=actors)

        return mutate_scene(project_id, revision, apply)

    @app.get("/api/v1/projects/{project_id}/sample")
    def sample(project_id: str, t: float) -> dict:
        project = store.get(project_id)
        samples = sample_scene(project.scene, t)
        return {
            "t": t,
            "samples": [
                {
                    "actor_id": s.actor_id,
                    "quad": None
                    if s.quad is None
                    else {
                        "left": s.quad.left,
                        "top": s.quad.top,
                        "right": s.quad.right,
                        "bottom": s.quad.bottom,
                    },
                    "error": s.error,
                }
                for s in samples
            ],
        }

    @app.get("/api/v1/projects/{project_id}/validate")
    def validate(project_id: str) -> dict:
        project = store.get(project_id)
        return {"diagnostics": validate_scene(project.scene)}

    # --------------------------------------------------------------- jobs

    @app.post("/api/v1/projects/{project_id}/render", status_code=202)
    def render_project(project_id: str) -> dict:
        project = store.get(project_id)
        scene = project.scene
        if not scene.actors:
            raise ValueError("scene has no actors to stage")
        if not scene.scene_prompt.strip():
            raise ValueError("scene_prompt must be non-empty before rendering")
        diagnostics = validate_scene(scene)
        if diagnostics:
            raise SceneFormatError("; ".join(diagnostics))
        imagery.get_node(scene.node_id)  # fail fast on unknown nodes
        payload = {
            "project_id": project_id,
            "revision": project.revision,
            "scene": scene_to_dict(scene),
        }
        job_id = queue.submit_deferred(
            payload,
            lambda job_dir: render_bundle_for_scene(scene, imagery, job_dir),
        )
        return {"job_id": job_id}

    @app.get("/api/v1/jobs")
    def list_jobs() -> dict:
        return {"jobs": [snapshot_to_dict(s) for s in queue.jobs()]}

    @app.get("/api/v1/jobs/{job_id}")
    def get_job(job_id: str) -> dict:
        return snapshot_to_dict(queue.poll(job_id))

    @app.get("/api/v1/jobs/{job_id}/frames/{k}")
    def get_job_frame(job_id: str, k: int) -> Response:
        snap = queue.poll(job_id)
        if snap.result_dir is None:
            return problem(409, "job not finished", f"job {job_id} has no result yet")
        from .render import FRAME_PATTERN

        path = Path(snap.result_dir) / FRAME_PATTERN.format(k)
        if not path.exists():
            return problem(404, "unknown frame", f"no frame {k} in job {job_id}")
        return Response(content=path.read_bytes(), media_type="image/png")

    # ------------------------------------------------------------- static

    static_dir = config.static_dir
    if static_dir is not None and Path(static_dir).exists():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
