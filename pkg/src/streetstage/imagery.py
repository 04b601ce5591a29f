"""Street-view imagery retrieval: providers, disk cache, panorama decoding."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from io import BytesIO
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np
from PIL import Image

from .errors import StageError
from .geo import GeoPoint
from .panorama import Panorama

logger = logging.getLogger(__name__)

DEFAULT_CACHE_BUDGET_BYTES = 2 * 1024**3
GRAPH_API_BASE = "https://graph.mapillary.com"
TOKEN_ENV = "MAPILLARY_TOKEN"
SEARCH_FIELDS = "id,computed_geometry,compass_angle,is_pano,captured_at,thumb_original_url"
PROVIDER_SEARCH_CAP = 2000


class ProviderUnavailable(StageError):
    """Imagery provider cannot be reached or answered with a server error."""


class QuotaExceeded(StageError):
    """Imagery provider rejected the request for rate/quota reasons."""


class DecodeError(StageError):
    """Fetched bytes could not be decoded into a usable panorama."""


@dataclass(frozen=True)
class ImageryNode:
    """One capture point offered by a provider."""

    node_id: str
    position: GeoPoint
    compass_angle: float  # radians, [0, 2*pi)
    is_panoramic: bool
    capture_time: datetime
    image_url: str | None = None


@dataclass(frozen=True)
class BoundingBox:
    """Geodetic bbox; min corner strictly south-west of the max corner."""

    minimum: GeoPoint
    maximum: GeoPoint

    def __post_init__(self) -> None:
        if (
            self.minimum.latitude >= self.maximum.latitude
            or self.minimum.longitude >= self.maximum.longitude
        ):
            raise ValueError("bbox min corner must be strictly south-west of max corner")

    def contains(self, point: GeoPoint) -> bool:
        return (
            self.minimum.latitude <= point.latitude <= self.maximum.latitude
            and self.minimum.longitude <= point.longitude <= self.maximum.longitude
        )

    @classmethod
    def from_degrees(
        cls, min_lon: float, min_lat: float, max_lon: float, max_lat: float
    ) -> "BoundingBox":
        return cls(
            GeoPoint.from_degrees(min_lat, min_lon),
            GeoPoint.from_degrees(max_lat, max_lon),
        )


class ImageryProvider(Protocol):
    def search_nodes(self, bbox: BoundingBox, limit: int = 50) -> list[ImageryNode]:
        """Panoramic nodes inside bbox, newest capture first."""

    def get_node(self, node_id: str) -> ImageryNode:
        """Node metadata by id; raises ProviderUnavailable when unknown."""

    def fetch_image_bytes(self, node: ImageryNode) -> bytes:
        """Raw encoded panorama bytes for a node."""


def _sorted_limited(nodes: list[ImageryNode], limit: int) -> list[ImageryNode]:
    if not 1 <= limit <= PROVIDER_SEARCH_CAP:
        raise ValueError(f"limit {limit} outside [1, {PROVIDER_SEARCH_CAP}]")
    nodes.sort(key=lambda n: n.capture_time, reverse=True)
    return nodes[:limit]


class FixtureProvider:
    """Imagery served from a directory: nodes.json plus <node_id>.png files."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._nodes: dict[str, ImageryNode] = {}
        for raw in json.loads((self.root / "nodes.json").read_text()):
            compass = raw.get("compass_angle_deg")
            if compass is None:
                logger.warning("fixture node %s has no compass angle; assuming 0", raw["node_id"])
                compass = 0.0
            node = ImageryNode(
                node_id=str(raw["node_id"]),
                position=GeoPoint.from_degrees(float(raw["lat_deg"]), float(raw["lon_deg"])),
                compass_angle=math.radians(float(compass)),
                is_panoramic=bool(raw["is_panoramic"]),
                capture_time=datetime.fromisoformat(raw["capture_time"]),
            )
            self._nodes[node.node_id] = node

    def search_nodes(self, bbox: BoundingBox, limit: int = 50) -> list[ImageryNode]:
        hits = [
            n for n in self._nodes.values() if n.is_panoramic and bbox.contains(n.position)
        ]
        return _sorted_limited(hits, limit)

    def get_node(self, node_id: str) -> ImageryNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise ProviderUnavailable(f"fixture has no node {node_id!r}") from None

    def fetch_image_bytes(self, node: ImageryNode) -> bytes:
        path = self.root / f"{node.node_id}.png"
        if not path.exists():
            raise ProviderUnavailable(f"fixture image missing for node {node.node_id!r}")
        return path.read_bytes()


class MapillaryProvider:
    """Graph-API-shaped live provider (bearer token, bbox image search)."""

    def __init__(
        self,
        token: str | None = None,
        client: httpx.Client | None = None,
        base_url: str = GRAPH_API_BASE,
    ):
        self.token = token if token is not None else os.environ.get(TOKEN_ENV, "")
        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.Client(timeout=30.0)

    def _get(self, url: str, params: dict | None = None) -> httpx.Response:
        headers = {"Authorization": f"OAuth {self.token}"}
        try:
            response = self.client.get(url, params=params, headers=headers)
        except httpx.HTTPError as exc:
            raise ProviderUnavailable(f"imagery request failed: {exc}") from exc
        if response.status_code == 429:
            raise QuotaExceeded("imagery provider rate limit hit")
        if response.status_code >= 500:
            raise ProviderUnavailable(f"imagery provider error {response.status_code}")
        if response.status_code >= 400:
            raise ProviderUnavailable(
                f"imagery request rejected ({response.status_code}): {response.text[:200]}"
            )
        return response

    def _node_from_payload(self, raw: dict) -> ImageryNode:
        lon, lat = raw["computed_geometry"]["coordinates"]
        compass = raw.get("compass_angle")
        if compass is None:
            logger.warning("node %s has no compass angle; assuming 0", raw["id"])
            compass = 0.0
        captured = datetime.fromtimestamp(int(raw["captured_at"]) / 1000.0, tz=timezone.utc)
        return ImageryNode(
            node_id=str(raw["id"]),
            position=GeoPoint.from_degrees(float(lat), float(lon)),
            compass_angle=math.radians(float(compass)),
            is_panoramic=bool(raw.get("is_pano", False)),
            capture_time=captured,
            image_url=raw.get("thumb_original_url"),
        )

    def search_nodes(self, bbox: BoundingBox, limit: int = 50) -> list[ImageryNode]:
        bbox_param = ",".join(
            f"{v:.7f}"
            for v in (
                bbox.minimum.longitude_deg,
                bbox.minimum.latitude_deg,
                bbox.maximum.longitude_deg,
                bbox.maximum.latitude_deg,
            )
        )
        response = self._get(
            f"{self.base_url}/images",
            params={"bbox": bbox_param, "fields": SEARCH_FIELDS, "limit": limit},
        )
        nodes = [self._node_from_payload(raw) for raw in response.json().get("data", [])]
        return _sorted_limited([n for n in nodes if n.is_panoramic], limit)

    def get_node(self, node_id: str) -> ImageryNode:
        response = self._get(
            f"{self.base_url}/{node_id}", params={"fields": SEARCH_FIELDS}
        )
        return self._node_from_payload(response.json())

    def fetch_image_bytes(self, node: ImageryNode) -> bytes:
        url = node.image_url or self.get_node(node.node_id).image_url
        if not url:
            raise ProviderUnavailable(f"node {node.node_id!r} exposes no image url")
        return self._get(url).content


class DiskCache:
    """LRU byte cache with atomic writes, keyed by node id."""

    def __init__(self, root: str | Path, budget_bytes: int = DEFAULT_CACHE_BUDGET_BYTES):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.budget_bytes = budget_bytes
        self._lock = threading.Lock()
        self._index_path = self.root / "index.json"
        self._index: dict[str, dict] = {}
        if self._index_path.exists():
            self._index = json.loads(self._index_path.read_text())
        self._clock = 0
        for entry in self._index.values():
            self._clock = max(self._clock, entry["used"])

    def _entry_path(self, key: str) -> Path:
        return self.root / f"{hashlib.sha256(key.encode()).hexdigest()}.bin"

    def _save_index(self) -> None:
        tmp = tempfile.NamedTemporaryFile(
            "w", dir=self.root, prefix="index-", suffix=".tmp", delete=False
        )
        with tmp:
            json.dump(self._index, tmp)
        os.replace(tmp.name, self._index_path)

    def get(self, key: str) -> bytes | None:
        with self._lock:
            entry = self._index.get(key)
            if entry is None:
                return None
            path = self._entry_path(key)
            if not path.exists():
                del self._index[key]
                self._save_index()
                return None
            data = path.read_bytes()
            if hashlib.sha256(data).hexdigest() != entry["sha256"]:
                logger.warning("cache entry for %s corrupt; dropping", key)
                path.unlink(missing_ok=True)
                del self._index[key]
                self._save_index()
                return None
            self._clock += 1
            entry["used"] = self._clock
            self._save_index()
            return data

    def put(self, key: str, data: bytes) -> None:
        with self._lock:
            path = self._entry_path(key)
            tmp = tempfile.NamedTemporaryFile(
                "wb", dir=self.root, prefix="blob-", suffix=".tmp", delete=False
            )
            with tmp:
                tmp.write(data)
            os.replace(tmp.name, path)
            self._clock += 1
            self._index[key] = {
                "size": len(data),
                "sha256": hashlib.sha256(data).hexdigest(),
                "used": self._clock,
            }
            self._evict_locked()
            self._save_index()

    def _evict_locked(self) -> None:
        total = sum(e["size"] for e in self._index.values())
        if total <= self.budget_bytes:
            return
        for key in sorted(self._index, key=lambda k: self._index[k]["used"]):
            if total <= self.budget_bytes:
                break
            total -= self._index[key]["size"]
            self._entry_path(key).unlink(missing_ok=True)
            del self._index[key]

    @property
    def total_bytes(self) -> int:
        with self._lock:
            return sum(e["size"] for e in self._index.values())


def decode_panorama(data: bytes, north_offset: float) -> Panorama:
    """Decode image bytes into a Panorama.

    :raises DecodeError: undecodable bytes or a non-2:1 raster
    """
    try:
        with Image.open(BytesIO(data)) as img:
            pixels = np.asarray(img.convert("RGB"))
    except Exception as exc:
        raise DecodeError(f"cannot decode panorama image: {exc}") from exc
    try:
        return Panorama(pixels=pixels, north_offset=north_offset)
    except ValueError as exc:
        raise DecodeError(str(exc)) from exc


class ImageryService:
    """Provider plus cache, with per-node single-flight fetching."""

    def __init__(self, provider: ImageryProvider, cache: DiskCache | None = None):
        self.provider = provider
        self.cache = cache
        self.cache_hits = 0
        self.cache_misses = 0
        self._flight_lock = threading.Lock()
        self._node_locks: dict[str, threading.Lock] = {}

    def _node_lock(self, node_id: str) -> threading.Lock:
        with self._flight_lock:
            return self._node_locks.setdefault(node_id, threading.Lock())

    def search_nodes(self, bbox: BoundingBox, limit: int = 50) -> list[ImageryNode]:
        return self.provider.search_nodes(bbox, limit)

    def get_node(self, node_id: str) -> ImageryNode:
        return self.provider.get_node(node_id)

    def fetch_panorama(self, node: ImageryNode) -> Panorama:
        """Panorama for a node, served from cache when possible.

        Concurrent fetches for the same node collapse into a single provider
        call (single flight).
        """
        with self._node_lock(node.node_id):
            if self.cache is not None:
                cached = self.cache.get(node.node_id)
                if cached is not None:
                    self.cache_hits += 1
                    return decode_panorama(cached, node.compass_angle)
            self.cache_misses += 1
            data = self.provider.fetch_image_bytes(node)
            pano = decode_panorama(data, node.compass_angle)
            if self.cache is not None:
                self.cache.put(node.node_id, data)
            return pano
