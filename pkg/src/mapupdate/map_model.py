"""Vectorized-map data model: lane instances, tiles, change records, and the
coordinate/serialization plumbing shared by every other module.

Coordinates are meters in a tile-local frame with the origin at the lower-left
corner, x to the east, y to the north. Pixel space (origin top-left, y down)
appears only at rasterization and model I/O boundaries.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParseError

# Style vocabulary. Crosswalk edges are closed point loops; everything else is
# an open polyline.
STYLES = ("solid", "dashed", "double_solid", "curb", "crosswalk_edge")
STYLE_INDEX = {name: i for i, name in enumerate(STYLES)}
CLOSED_STYLES = frozenset({"crosswalk_edge"})

ROLES = ("historical", "ground_truth", "predicted")

# Fixed point count per instance after normalization.
DEFAULT_POINTS_PER_INSTANCE = 50

TILE_FORMAT_VERSION = 1

# Change taxonomy.
NO_CHANGE = "no_change"
STYLE_CHANGE = "style_change"
ADDITION = "addition"
DELETION = "deletion"
CHANGE_KINDS = (NO_CHANGE, STYLE_CHANGE, ADDITION, DELETION)


@dataclass(frozen=True)
class LaneInstance:
    """One map element: an ordered 2-D point set plus a style label."""

    id: str
    points: np.ndarray  # (n, 2) float64, meters, tile-local frame
    style: str
    role: str = "historical"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise DomainError(f"instance {self.id!r}: points must be (n, 2) with n >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError(f"instance {self.id!r}: non-finite coordinate")
        if self.style not in STYLE_INDEX:
            raise DomainError(f"instance {self.id!r}: unknown style {self.style!r}")
        if self.role not in ROLES:
            raise DomainError(f"instance {self.id!r}: unknown role {self.role!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def is_closed(self) -> bool:
        return self.style in CLOSED_STYLES

    def with_style(self, style: str, id: str | None = None, role: str | None = None) -> "LaneInstance":
        return LaneInstance(id if id is not None else self.id, self.points, style,
                            role if role is not None else self.role)

    def with_role(self, role: str, id: str | None = None) -> "LaneInstance":
        return LaneInstance(id if id is not None else self.id, self.points, self.style, role)


# Slack for floating-point drift when checking the tile-extent invariant.
EXTENT_TOL = 1e-6


@dataclass(frozen=True)
class VectorMapTile:
    """A mesh-aligned collection of lane instances with raster metadata."""

    tile_id: str
    origin: tuple[float, float]
    resolution: float  # pixels per meter
    width_px: int
    height_px: int
    instances: tuple[LaneInstance, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.resolution <= 0:
            raise DomainError(f"tile {self.tile_id!r}: resolution must be positive")
        if self.width_px <= 0 or self.height_px <= 0:
            raise DomainError(f"tile {self.tile_id!r}: zero-area raster")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "instances", tuple(self.instances))
        seen = set()
        ex, ey = self.extent
        for inst in self.instances:
            if inst.id in seen:
                raise DomainError(f"tile {self.tile_id!r}: duplicate instance id {inst.id!r}")
            seen.add(inst.id)
            pts = inst.points
            if (pts[:, 0].min() < -EXTENT_TOL or pts[:, 0].max() > ex + EXTENT_TOL
                    or pts[:, 1].min() < -EXTENT_TOL or pts[:, 1].max() > ey + EXTENT_TOL):
                raise DomainError(f"tile {self.tile_id!r}: instance {inst.id!r} outside extent "
                                  f"[0, {ex}] x [0, {ey}]")

    @property
    def extent(self) -> tuple[float, float]:
        """Ground coverage in meters: (width_px / resolution, height_px / resolution)."""
        return (self.width_px / self.resolution, self.height_px / self.resolution)

    def get(self, instance_id: str) -> LaneInstance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(instance_id)

    def replace_instances(self, instances, role: str | None = None) -> "VectorMapTile":
        insts = tuple(instances)
        if role is not None:
            insts = tuple(i if i.role == role else i.with_role(role) for i in insts)
        return VectorMapTile(self.tile_id, self.origin, self.resolution,
                             self.width_px, self.height_px, insts)

    def normalized(self, n_points: int = DEFAULT_POINTS_PER_INSTANCE) -> "VectorMapTile":
        """Resample every instance to exactly ``n_points`` points."""
        out = []
        for inst in self.instances:
            if inst.is_closed:
                pts = resample_loop(inst.points, n_points)
            else:
                pts = resample_polyline(inst.points, n_points)
            out.append(LaneInstance(inst.id, pts, inst.style, inst.role))
        return self.replace_instances(out)


@dataclass(frozen=True)
class ChangeRecord:
    """Per-instance change verdict linking the new-side and historical tiles."""

    kind: str
    predicted_id: str | None = None
    historical_id: str | None = None

    def __post_init__(self):
        if self.kind not in CHANGE_KINDS:
            raise DomainError(f"unknown change kind {self.kind!r}")
        if self.kind == ADDITION and not (self.predicted_id and self.historical_id is None):
            raise DomainError("addition requires predicted_id only")
        if self.kind == DELETION and not (self.historical_id and self.predicted_id is None):
            raise DomainError("deletion requires historical_id only")
        if self.kind in (NO_CHANGE, STYLE_CHANGE) and not (self.predicted_id and self.historical_id):
            raise DomainError(f"{self.kind} requires both predicted_id and historical_id")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "predicted_id": self.predicted_id,
                "historical_id": self.historical_id}

    @classmethod
    def from_dict(cls, d: dict) -> "ChangeRecord":
        return cls(d["kind"], d.get("predicted_id"), d.get("historical_id"))


# ---------------------------------------------------------------------------
# Coordinate transforms
# ---------------------------------------------------------------------------

def geo_to_pixel(point, tile: VectorMapTile) -> tuple[float, float]:
    """Map a tile-local metric point to pixel coordinates (origin top-left).

    px = x * resolution, py = height_px - y * resolution. Raises DomainError
    for points outside the tile extent.
    """
    x, y = float(point[0]), float(point[1])
    ex, ey = tile.extent
    if not (-EXTENT_TOL <= x <= ex + EXTENT_TOL):
        raise DomainError(f"x={x} outside tile extent [0, {ex}]")
    if not (-EXTENT_TOL <= y <= ey + EXTENT_TOL):
        raise DomainError(f"y={y} outside tile extent [0, {ey}]")
    return (x * tile.resolution, tile.height_px - y * tile.resolution)


def pixel_to_geo(pixel, tile: VectorMapTile) -> tuple[float, float]:
    """Inverse of :func:`geo_to_pixel`."""
    px, py = float(pixel[0]), float(pixel[1])
    return (px / tile.resolution, (tile.height_px - py) / tile.resolution)


def geo_to_pixel_array(points: np.ndarray, tile: VectorMapTile) -> np.ndarray:
    """Vectorized geo_to_pixel without the extent check (rasterization clips)."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 0] * tile.resolution
    out[:, 1] = tile.height_px - pts[:, 1] * tile.resolution
    return out


# ---------------------------------------------------------------------------
# Polyline normalization
# ---------------------------------------------------------------------------

def polyline_length(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    return float(np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=1)).sum())


def resample_polyline(points, n: int) -> np.ndarray:
    """Resample a polyline to ``n`` points equally spaced by arc length.

    Endpoints are preserved exactly. A degenerate (zero-length) input yields
    ``n`` copies of the first point.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise DomainError(f"polyline must be (n, 2) with n >= 1, got {pts.shape}")
    if n < 2:
        raise DomainError(f"resample count must be >= 2, got {n}")
    seg = np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0.0:
        return np.repeat(pts[:1], n, axis=0)
    targets = np.linspace(0.0, total, n)
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    seg_len = np.where(seg[idx] > 0, seg[idx], 1.0)
    frac = (targets - cum[idx]) / seg_len
    out = pts[idx] + frac[:, None] * (pts[idx + 1] - pts[idx])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def resample_loop(points, n: int) -> np.ndarray:
    """Resample a closed loop (implicit last-to-first edge) to ``n`` points.

    The output keeps the loop convention: points[0] is on the loop and the
    closing edge back to it is implicit.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise DomainError(f"loop must be (n, 2) with n >= 1, got {pts.shape}")
    if n < 2:
        raise DomainError(f"resample count must be >= 2, got {n}")
    ring = np.concatenate([pts, pts[:1]], axis=0)
    dense = resample_polyline(ring, n + 1)
    return dense[:-1]


# ---------------------------------------------------------------------------
# Tile serialization (JSON lines, versioned header, 6-decimal coordinates)
# ---------------------------------------------------------------------------

def _format_points(points: np.ndarray) -> str:
    return "[" + ",".join(f"[{x:.6f},{y:.6f}]" for x, y in points) + "]"


def serialize_tile(tile: VectorMapTile) -> bytes:
    """Encode a tile as JSON lines.

    Line 1 is the header; each further line is one instance with coordinates
    written at 6 decimal places. serialize(deserialize(serialize(t))) is
    byte-identical to serialize(t).
    """
    buf = io.StringIO()
    header = {"version": TILE_FORMAT_VERSION, "tile_id": tile.tile_id,
              "origin": [tile.origin[0], tile.origin[1]], "resolution": tile.resolution,
              "width_px": tile.width_px, "height_px": tile.height_px}
    buf.write(json.dumps(header, separators=(",", ":")))
    buf.write("\n")
    for inst in tile.instances:
        buf.write('{"id":%s,"style":%s,"role":%s,"points":%s}\n'
                  % (json.dumps(inst.id), json.dumps(inst.style), json.dumps(inst.role),
                     _format_points(inst.points)))
    return buf.getvalue().encode("utf-8")


def deserialize_tile(data: bytes) -> VectorMapTile:
    """Decode :func:`serialize_tile` output. Raises ParseError with the byte
    offset of the offending record; a truncated stream never yields a tile."""
    offset = 0
    lines = []
    for raw in data.split(b"\n"):
        lines.append((offset, raw))
        offset += len(raw) + 1
    # A well-formed stream ends with a newline, so the final split element is
    # empty; anything else is a truncated record.
    if not lines or lines[0][1] == b"":
        raise ParseError("empty stream", byte_offset=0)
    tail_offset, tail = lines[-1]
    if tail != b"":
        raise ParseError("truncated stream: missing trailing newline", byte_offset=tail_offset)
    records = lines[:-1]

    def parse_json(off, raw, what):
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"malformed {what}: {exc}", byte_offset=off) from exc

    hdr_off, hdr_raw = records[0]
    header = parse_json(hdr_off, hdr_raw, "header")
    if not isinstance(header, dict) or header.get("version") != TILE_FORMAT_VERSION:
        raise ParseError(f"unknown tile format version {header.get('version') if isinstance(header, dict) else header!r}",
                         byte_offset=hdr_off)
    try:
        tile_id = header["tile_id"]
        origin = (float(header["origin"][0]), float(header["origin"][1]))
        resolution = float(header["resolution"])
        width_px = int(header["width_px"])
        height_px = int(header["height_px"])
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ParseError(f"malformed header: {exc}", byte_offset=hdr_off) from exc

    instances = []
    for off, raw in records[1:]:
        rec = parse_json(off, raw, "instance record")
        try:
            inst = LaneInstance(rec["id"], np.asarray(rec["points"], dtype=np.float64),
                                rec["style"], rec["role"])
        except (KeyError, TypeError, ValueError, DomainError) as exc:
            raise ParseError(f"malformed instance record: {exc}", byte_offset=off) from exc
        instances.append(inst)
    try:
        return VectorMapTile(tile_id, origin, resolution, width_px, height_px, tuple(instances))
    except DomainError as exc:
        raise ParseError(f"inconsistent tile: {exc}", byte_offset=0) from exc


def write_tile(tile: VectorMapTile, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_tile(tile))


def read_tile(path) -> VectorMapTile:
    with open(path, "rb") as fh:
        return deserialize_tile(fh.read())


def write_change_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=0, separators=(",", ":"))
        fh.write("\n")


def read_change_records(path) -> list[ChangeRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return [ChangeRecord.from_dict(d) for d in json.load(fh)]
