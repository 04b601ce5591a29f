"""Command line interface: scout, validate, preview, render, jobs, serve."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .config import load_config
from .errors import StageError
from .imagery import BoundingBox
from .jobs import JobState, RenderQueue, replay_snapshots
from .render import encode_png, overlay_frame
from .scene_io import load_scene
from .service import make_backend, make_imagery, render_bundle_for_scene
from .staging import camera_at, sample_scene, validate_scene

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streetstage",
        description="Stage actors over street-view panoramas and produce video inpainting job inputs.",
    )
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    scout = sub.add_parser("scout", help="list panoramic nodes inside a bbox")
    scout.add_argument("--bbox", required=True, help="min_lon,min_lat,max_lon,max_lat (degrees)")
    scout.add_argument("--limit", type=int, default=50)
    scout.add_argument("--fixtures", type=Path, default=None, help="fixture imagery directory")

    validate = sub.add_parser("validate", help="check a scene file")
    validate.add_argument("scene", type=Path)

    preview = sub.add_parser("preview", help="render one preview frame with mask overlays")
    preview.add_argument("scene", type=Path)
    preview.add_argument("--t", type=float, default=0.0, help="timeline instant (seconds)")
    preview.add_argument("--out", type=Path, required=True, help="output PNG path")
    preview.add_argument("--fixtures", type=Path, default=None)

    render = sub.add_parser("render", help="render job inputs and run them through a backend")
    render.add_argument("scene", type=Path)
    render.add_argument("--backend", choices=["mock", "http"], default=None)
    render.add_argument("--backend-url", default=None)
    render.add_argument("--latency", type=float, default=None, help="mock backend latency per mask (s)")
    render.add_argument("--out", type=Path, required=True, help="directory for the composited result")
    render.add_argument("--workdir", type=Path, default=None, help="queue workdir (default: out/work)")
    render.add_argument("--fixtures", type=Path, default=None)
    render.add_argument("--timeout", type=float, default=600.0)

    jobs = sub.add_parser("jobs", help="inspect a queue workdir")
    jobs_sub = jobs.add_subparsers(dest="jobs_command", required=True)
    jobs_ls = jobs_sub.add_parser("ls", help="list jobs")
    jobs_ls.add_argument("--workdir", type=Path, required=True)
    jobs_show = jobs_sub.add_parser("show", help="show one job")
    jobs_show.add_argument("job_id")
    jobs_show.add_argument("--workdir", type=Path, required=True)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--fixtures", type=Path, default=None)
    serve.add_argument("--workdir", type=Path, default=None)
    serve.add_argument("--static", type=Path, default=None, help="built UI directory")

    return parser


def _config_from_args(args: argparse.Namespace, fixtures: Path | None = None, **extra):
    overrides = dict(extra)
    if fixtures is not None:
        overrides["provider"] = "fixture"
        overrides["fixture_dir"] = fixtures
    return load_config(args.config, **overrides)


def _cmd_scout(args: argparse.Namespace) -> int:
    config = _config_from_args(args, args.fixtures)
    imagery = make_imagery(config)
    try:
        parts = [float(x) for x in args.bbox.split(",")]
    except ValueError:
        parts = []
    if len(parts) != 4:
        print("error: --bbox must be min_lon,min_lat,max_lon,max_lat", file=sys.stderr)
        return 2
    nodes = imagery.search_nodes(BoundingBox.from_degrees(*parts), args.limit)
    for node in nodes:
        print(
            f"{node.node_id}\t{node.position.latitude_deg:.6f}\t"
            f"{node.position.longitude_deg:.6f}\t{math.degrees(node.compass_angle):.1f}\t"
            f"{node.capture_time.isoformat()}"
        )
    print(f"{len(nodes)} node(s)", file=sys.stderr)
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene)
    diagnostics = validate_scene(scene)
    for message in diagnostics:
        print(f"diagnostic: {message}")
    if diagnostics:
        return 1
    print(f"ok: {args.scene} ({len(scene.actors)} actor(s), {scene.frame_count()} frames)")
    return 0


def _resolve_references(scene, scene_path: Path):
    """Make actor reference image paths absolute relative to the scene file."""
    from dataclasses import replace

    actors = []
    for actor in scene.actors:
        if actor.reference_image is not None and not Path(actor.reference_image).is_absolute():
            resolved = (scene_path.parent / actor.reference_image).resolve()
            actor = replace(actor, reference_image=str(resolved))
        actors.append(actor)
    return replace(scene, actors=tuple(actors))


def _cmd_preview(args: argparse.Namespace) -> int:
    from .panorama import render_view

    config = _config_from_args(args, args.fixtures)
    imagery = make_imagery(config)
    scene = load_scene(args.scene)
    node = imagery.get_node(scene.node_id)
    pano = imagery.fetch_panorama(node)
    camera = camera_at(scene, args.t)
    frame = render_view(pano, camera, scene.resolution)
    quads = [s.quad for s in sample_scene(scene, args.t) if s.quad is not None]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_bytes(encode_png(overlay_frame(frame, quads)))
    print(f"wrote {args.out} (t={args.t}s, {len(quads)} visible quad(s))")
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    config = _config_from_args(
        args,
        args.fixtures,
        backend=args.backend,
        backend_url=args.backend_url,
        mock_latency_s=args.latency,
    )
    imagery = make_imagery(config)
    scene = _resolve_references(load_scene(args.scene), args.scene)
    diagnostics = validate_scene(scene)
    if diagnostics:
        for message in diagnostics:
            print(f"diagnostic: {message}", file=sys.stderr)
        return 1
    backend = make_backend(config)
    workdir = args.workdir or (args.out / "work")
    queue = RenderQueue(workdir, backend)
    queue.start()
    try:
        job_id = queue.submit_deferred(
            {"scene_path": str(args.scene)},
            lambda job_dir: render_bundle_for_scene(scene, imagery, job_dir),
        )
        print(f"job {job_id} submitted")
        snap = queue.wait(job_id, timeout=args.timeout)
    finally:
        queue.stop()
    if snap.state is not JobState.DONE:
        print(f"job {job_id} {snap.state.value}: {snap.error}", file=sys.stderr)
        return 1
    from .render import load_frames, write_frames

    result = load_frames(snap.result_dir)
    manifest = write_frames(result, args.out)
    print(f"job {job_id} done: {manifest['count']} frames -> {args.out}")
    return 0


def _format_job(snap) -> str:
    mask_states = ",".join(s.state.value for s in snap.masks) or "-"
    return (
        f"{snap.job_id}\t{snap.state.value}\tattempts={snap.attempts}\t"
        f"masks=[{mask_states}]\t{snap.error or ''}"
    )


def _cmd_jobs(args: argparse.Namespace) -> int:
    snapshots = replay_snapshots(args.workdir)
    if args.jobs_command == "ls":
        for snap in snapshots:
            print(_format_job(snap))
        print(f"{len(snapshots)} job(s)", file=sys.stderr)
        return 0
    for snap in snapshots:
        if snap.job_id == args.job_id:
            payload = {
                "job_id": snap.job_id,
                "state": snap.state.value,
                "bundle_id": snap.bundle_id,
                "attempts": snap.attempts,
                "error": snap.error,
                "result_dir": None if snap.result_dir is None else str(snap.result_dir),
                "masks": [
                    {"index": s.index, "state": s.state.value} for s in snap.masks
                ],
            }
            print(json.dumps(payload, indent=2))
            return 0
    print(f"error: no job {args.job_id} in {args.workdir}", file=sys.stderr)
    return 1


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    config = _config_from_args(
        args, args.fixtures, workdir=args.workdir, static_dir=args.static
    )
    app = create_app(config)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


_COMMANDS = {
    "scout": _cmd_scout,
    "validate": _cmd_validate,
    "preview": _cmd_preview,
    "render": _cmd_render,
    "jobs": _cmd_jobs,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
