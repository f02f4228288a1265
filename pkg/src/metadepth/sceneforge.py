"""Procedural RGB-D rooms rendered by ray casting, plus PPM/PFM dataset I/O.

World frame: x along the room width, y along its depth, z up; the room
occupies ``[0, W] x [0, D] x [0, H]``. Camera frame: x right, y down, z
forward, so the recorded depth is the planar distance along the optical axis.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evalproto import CameraIntrinsics
from .tasks import Dataset, RgbdSample

TEXTURES = ("none", "checker", "stripes", "painting-blocks")
AMBIENT = 0.35


class GenerationError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    albedo: tuple

    def contains(self, p, margin: float = 0.0) -> bool:
        return all(self.lo[a] - margin < p[a] < self.hi[a] + margin for a in range(3))


@dataclass(frozen=True)
class WallTexture:
    kind: str = "none"
    color_a: tuple = (0.8, 0.8, 0.8)
    color_b: tuple = (0.3, 0.3, 0.3)
    tile: float = 0.5
    # painting-blocks: (wall index 0..3, s0, s1, t0, t1, (r, g, b))
    blocks: tuple = ()

    def __post_init__(self):
        if self.kind not in TEXTURES:
            raise ValueError(f"unknown wall texture {self.kind!r}")


@dataclass(frozen=True)
class CameraPose:
    position: tuple
    yaw: float = 0.0
    pitch: float = 0.0

    def axes(self) -> tuple:
        """(right, down, forward) unit vectors in world coordinates."""
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        fwd = np.array([sy * cp, cy * cp, sp])
        right = np.array([cy, -sy, 0.0])
        down = np.cross(fwd, right)
        return right, down, fwd


@dataclass(frozen=True)
class SceneSpec:
    room_extent: tuple
    camera: CameraPose
    intrinsics: CameraIntrinsics
    boxes: tuple = ()
    wall_texture: WallTexture = field(default_factory=WallTexture)
    floor_albedo: tuple = (0.55, 0.45, 0.35)
    ceiling_albedo: tuple = (0.9, 0.9, 0.9)
    light_dir: tuple = (0.3, 0.5, -0.81)

    def with_texture(self, texture: WallTexture) -> "SceneSpec":
        return SceneSpec(
            self.room_extent, self.camera, self.intrinsics, self.boxes, texture,
            self.floor_albedo, self.ceiling_albedo, self.light_dir,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _wall_albedo(tex: WallTexture, wall: np.ndarray, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    a = np.asarray(tex.color_a, dtype=np.float64)
    b = np.asarray(tex.color_b, dtype=np.float64)
    n = s.shape[0]
    if tex.kind == "none":
        return np.broadcast_to(a, (n, 3)).copy()
    if tex.kind == "checker":
        sel = (np.floor(s / tex.tile) + np.floor(t / tex.tile)) % 2 == 1
    elif tex.kind == "stripes":
        sel = np.floor(s / tex.tile) % 2 == 1
    else:
        out = np.broadcast_to(a, (n, 3)).copy()
        for wi, s0, s1, t0, t1, col in tex.blocks:
            hit = (wall == wi) & (s >= s0) & (s <= s1) & (t >= t0) & (t <= t1)
            out[hit] = col
        return out
    return np.where(sel[:, None], b, a)


def _ray_grid(spec: SceneSpec, resolution: tuple) -> np.ndarray:
    h, w = resolution
    k = spec.intrinsics
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    right, down, fwd = spec.camera.axes()
    xc = ((u - k.cx) / k.fx).ravel()
    yc = ((v - k.cy) / k.fy).ravel()
    return xc[:, None] * right + yc[:, None] * down + fwd


def _validate(spec: SceneSpec) -> None:
    W, D, H = spec.room_extent
    p = spec.camera.position
    if not (0 < p[0] < W and 0 < p[1] < D and 0 < p[2] < H):
        raise GenerationError(f"camera {p} is outside the room {spec.room_extent}")
    for bx in spec.boxes:
        if not all(0 <= bx.lo[a] < bx.hi[a] <= spec.room_extent[a] for a in range(3)):
            raise GenerationError(f"box {bx} leaves the room")
        if bx.contains(p):
            raise GenerationError(f"camera {p} is inside box {bx}")


def render_scene(spec: SceneSpec, resolution: tuple = (64, 64)) -> RgbdSample:
    """Lambertian ray cast of the room; depth is planar, image quantized to 8 bits."""
    _validate(spec)
    h, w = resolution
    o = np.asarray(spec.camera.position, dtype=np.float64)
    d = _ray_grid(spec, resolution)
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    inv = 1.0 / d
    ext = np.asarray(spec.room_extent, dtype=np.float64)

    # room interior: exit through the nearest far plane
    t_axes = np.where(d > 0, (ext - o) * inv, -o * inv)
    axis = np.argmin(t_axes, axis=1)
    t_hit = t_axes[np.arange(len(d)), axis]
    # surface id: 0..3 walls (x=0, x=W, y=0, y=D), 4 floor, 5 ceiling, 6+ boxes
    positive = d[np.arange(len(d)), axis] > 0
    surf = np.where(axis == 0, np.where(positive, 1, 0), np.where(axis == 1, np.where(positive, 3, 2), np.where(positive, 5, 4)))
    normal = np.zeros_like(d)
    normal[np.arange(len(d)), axis] = np.where(positive, -1.0, 1.0)

    for bi, bx in enumerate(spec.boxes):
        lo = (np.asarray(bx.lo) - o) * inv
        hi = (np.asarray(bx.hi) - o) * inv
        tmin = np.minimum(lo, hi)
        tmax = np.maximum(lo, hi)
        near_axis = np.argmax(tmin, axis=1)
        t_near = tmin[np.arange(len(d)), near_axis]
        t_far = tmax.min(axis=1)
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < t_hit)
        if not hit.any():
            continue
        t_hit = np.where(hit, t_near, t_hit)
        surf = np.where(hit, 6 + bi, surf)
        nb = np.zeros_like(d)
        sign = -np.sign(d[np.arange(len(d)), near_axis])
        nb[np.arange(len(d)), near_axis] = sign
        normal = np.where(hit[:, None], nb, normal)

    pts = o + t_hit[:, None] * d
    albedo = np.zeros_like(d)
    walls = surf < 4
    if walls.any():
        sw = surf[walls]
        s = np.where(sw < 2, pts[walls, 1], pts[walls, 0])
        albedo[walls] = _wall_albedo(spec.wall_texture, sw, s, pts[walls, 2])
    albedo[surf == 4] = spec.floor_albedo
    albedo[surf == 5] = spec.ceiling_albedo
    for bi, bx in enumerate(spec.boxes):
        albedo[surf == 6 + bi] = bx.albedo

    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = AMBIENT + (1 - AMBIENT) * np.clip(-(normal @ light), 0, None)
    rgb = np.clip(albedo * shade[:, None], 0, 1)
    image = (np.round(rgb * 255) / 255).reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)
    # planar depth equals the ray parameter since the forward component of d is 1
    depth = t_hit.reshape(1, h, w).astype(np.float32)
    return RgbdSample(image=image, depth=depth)


def surface_distance(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Distance from world points to the nearest analytic surface of the scene."""
    ext = np.asarray(spec.room_extent)
    dist = np.min(np.concatenate([np.abs(points), np.abs(points - ext)], axis=1), axis=1)
    for bx in spec.boxes:
        lo, hi = np.asarray(bx.lo), np.asarray(bx.hi)
        # distance to the box surface (outside points only matter here)
        q = np.maximum(np.maximum(lo - points, points - hi), 0)
        outside = np.linalg.norm(q, axis=1)
        inside = -np.min(np.minimum(points - lo, hi - points), axis=1)
        dist = np.minimum(dist, np.abs(np.where(outside > 0, outside, inside)))
    return dist


def camera_to_world(spec: SceneSpec, cam_points: np.ndarray) -> np.ndarray:
    right, down, fwd = spec.camera.axes()
    return np.asarray(spec.camera.position) + cam_points[:, :1] * right + cam_points[:, 1:2] * down + cam_points[:, 2:] * fwd


# ---------------------------------------------------------------------------
# random scene generation

VARIETY = {
    "low": dict(
        rooms=((4.0, 5.0, 2.7), (5.0, 4.0, 2.6)), room_jitter=0.05,
        n_boxes=(2, 3), footprint=(0.4, 0.8), height=(0.4, 1.0),
        textures=("checker", "stripes"),
        palettes=(((0.85, 0.8, 0.7), (0.45, 0.4, 0.35)), ((0.7, 0.8, 0.85), (0.35, 0.4, 0.5))),
        tile=(0.4, 0.6), pitch_deg=(-10.0, 0.0), cam_height=(1.3, 1.6),
    ),
    "high": dict(
        rooms=None, width=(2.5, 8.0), room_height=(2.3, 3.8), room_jitter=0.0,
        n_boxes=(0, 6), footprint=(0.2, 1.5), height=(0.2, 2.0),
        textures=TEXTURES, palettes=None,
        tile=(0.1, 1.0), pitch_deg=(-35.0, 10.0), cam_height=(0.4, 2.2),
    ),
}
HFOV_DEG = 60.0


def _color(g: np.random.Generator, lo=0.15, hi=0.95) -> tuple:
    return tuple(float(x) for x in g.uniform(lo, hi, 3))


def random_room(variety: str, rng: np.random.Generator, resolution: tuple) -> dict:
    """Draw the scene-level parameters (everything except the camera)."""
    prm = VARIETY[variety]
    if prm["rooms"] is not None:
        base = prm["rooms"][rng.integers(len(prm["rooms"]))]
        ext = tuple(float(b + rng.uniform(-prm["room_jitter"], prm["room_jitter"])) for b in base)
    else:
        ext = (float(rng.uniform(*prm["width"])), float(rng.uniform(*prm["width"])), float(rng.uniform(*prm["room_height"])))
    boxes = []
    for _ in range(int(rng.integers(prm["n_boxes"][0], prm["n_boxes"][1] + 1))):
        sx, sy = (float(v) for v in rng.uniform(*prm["footprint"], 2))
        sz = float(min(rng.uniform(*prm["height"]), ext[2] - 0.1))
        sx, sy = min(sx, ext[0] - 0.2), min(sy, ext[1] - 0.2)
        x0 = float(rng.uniform(0.05, ext[0] - sx - 0.05))
        y0 = float(rng.uniform(0.05, ext[1] - sy - 0.05))
        boxes.append(Box((x0, y0, 0.0), (x0 + sx, y0 + sy, sz), _color(rng)))
    kind = str(prm["textures"][rng.integers(len(prm["textures"]))])
    if prm["palettes"] is not None:
        ca, cb = prm["palettes"][rng.integers(len(prm["palettes"]))]
    else:
        ca, cb = _color(rng), _color(rng)
    blocks = ()
    if kind == "painting-blocks":
        blk = []
        for _ in range(int(rng.integers(2, 7))):
            wi = int(rng.integers(4))
            span = ext[1] if wi < 2 else ext[0]
            bw, bh = float(rng.uniform(0.3, 1.5)), float(rng.uniform(0.3, 1.2))
            s0 = float(rng.uniform(0, max(span - bw, 0.01)))
            t0 = float(rng.uniform(0.5, max(ext[2] - bh, 0.6)))
            blk.append((wi, s0, s0 + bw, t0, t0 + bh, _color(rng)))
        blocks = tuple(blk)
    texture = WallTexture(kind, ca, cb, float(rng.uniform(*prm["tile"])), blocks)
    light = rng.normal(size=3)
    light[2] = -abs(light[2]) - 0.5
    light = tuple(float(v) for v in light / np.linalg.norm(light))
    floor = _color(rng, 0.2, 0.7) if variety == "high" else (0.55, 0.45, 0.35)
    return dict(room_extent=ext, boxes=tuple(boxes), wall_texture=texture, floor_albedo=floor, light_dir=light)


def random_camera(room: dict, variety: str, rng: np.random.Generator, max_tries: int = 1000) -> CameraPose:
    prm = VARIETY[variety]
    W, D, H = room["room_extent"]
    for _ in range(max_tries):
        z = float(min(rng.uniform(*prm["cam_height"]), H - 0.2))
        p = (float(rng.uniform(0.3, W - 0.3)), float(rng.uniform(0.3, D - 0.3)), z)
        if any(bx.contains(p, margin=0.2) for bx in room["boxes"]):
            continue
        yaw = float(rng.uniform(0, 2 * np.pi))
        pitch = float(np.radians(rng.uniform(*prm["pitch_deg"])))
        return CameraPose(p, yaw, pitch)
    raise GenerationError("could not place a camera outside every box")


def random_scene_specs(variety: str, n_scenes: int, views_per_scene: int, seed: int, resolution: tuple) -> list:
    """List of (scene index, [SceneSpec per view])."""
    if variety not in VARIETY:
        raise ValueError(f"variety must be one of {sorted(VARIETY)}")
    if n_scenes < 1 or views_per_scene < 1:
        raise ValueError("need at least one scene and one view")
    intr = CameraIntrinsics.from_fov(resolution[1], resolution[0], HFOV_DEG)
    out = []
    for si in range(n_scenes):
        rng = np.random.default_rng([seed, si])
        room = random_room(variety, rng, resolution)
        views = [SceneSpec(camera=random_camera(room, variety, rng), intrinsics=intr, **room) for _ in range(views_per_scene)]
        out.append((si, views))
    return out


def build_dataset(variety: str, n_scenes: int, views_per_scene: int, seed: int,
                  resolution: tuple = (64, 64), name: str = "") -> Dataset:
    """In-memory variant of :func:`generate_dataset` (same content, nothing written)."""
    samples = []
    for si, views in random_scene_specs(variety, n_scenes, views_per_scene, seed, resolution):
        for vi, spec in enumerate(views):
            s = render_scene(spec, resolution)
            s.scene_id, s.view_id = f"s{si:03d}", f"v{vi:03d}"
            samples.append(s)
    return Dataset(samples, name=name or f"{variety}-{seed}")


# ---------------------------------------------------------------------------
# file formats


def write_pfm(path, depth: np.ndarray) -> None:
    """Grayscale little-endian PFM ("Pf", scale -1), rows stored bottom-up."""
    arr = np.asarray(depth, dtype="<f4")
    arr = arr.reshape(arr.shape[-2:])
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr[::-1]).tobytes())


def _read_line(data: bytes, off: int) -> tuple:
    end = data.find(b"\n", off)
    if end < 0:
        raise FormatError("unterminated header line", off)
    return data[off:end].decode("ascii", errors="replace").strip(), end + 1


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    ident, off = _read_line(data, 0)
    if ident != "Pf":
        raise FormatError(f"expected grayscale 'Pf' identifier, got {ident!r}", 0)
    dims_at = off
    dims, off = _read_line(data, off)
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise FormatError(f"bad dimension line {dims!r}", dims_at) from None
    scale_at = off
    scale_s, off = _read_line(data, off)
    try:
        scale = float(scale_s)
    except ValueError:
        raise FormatError(f"bad scale {scale_s!r}", scale_at) from None
    if scale == 0:
        raise FormatError("scale must be non-zero", scale_at)
    dt = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    if len(data) - off < need:
        raise FormatError(f"expected {need} data bytes, found {len(data) - off}", off)
    arr = np.frombuffer(data, dtype=dt, count=w * h, offset=off).reshape(h, w)[::-1]
    return arr.astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, maxval 255, from a (3, H, W) float image in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.transpose(1, 2, 0).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, off = [], 0
    for _ in range(4):
        m = _TOKEN.match(data, off)
        if m is None:
            raise FormatError("truncated PPM header", off)
        tokens.append((m.group(1), m.start(1)))
        off = m.end(1)
    if tokens[0][0] != b"P6":
        raise FormatError(f"expected P6 magic, got {tokens[0][0]!r}", 0)
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        bad = next(t for t in tokens[1:] if not t[0].isdigit())
        raise FormatError(f"bad header field {bad[0]!r}", bad[1]) from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", tokens[3][1])
    off += 1  # single whitespace after maxval
    need = w * h * 3
    if len(data) - off < need:
        raise FormatError(f"expected {need} pixel bytes, found {len(data) - off}", off)
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3)
    return (px.transpose(2, 0, 1).astype(np.float32) / 255).astype(np.float32)


def save_rgbd(sample: RgbdSample, image_path, depth_path) -> None:
    write_ppm(image_path, sample.image)
    write_pfm(depth_path, sample.depth)


def load_rgbd(image_path, depth_path, scene_id: str = "", view_id: str = "") -> RgbdSample:
    try:
        img = read_ppm(image_path)
        dep = read_pfm(depth_path)
    except OSError as exc:
        raise OSError(f"cannot read sample {image_path} / {depth_path}: {exc}") from exc
    return RgbdSample(img, dep[None], scene_id, view_id)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    name: str
    variety: str
    samples: list  # dicts: image, depth, scene_id, view_id, intrinsics
    content_hash: str
    resolution: tuple = (64, 64)
    seed: Optional[int] = None
    root: Optional[str] = None

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        return json.dumps(d, indent=2, sort_keys=True)

    @property
    def spec_keys(self) -> set:
        return {s.get("spec_key", "") for s in self.samples}


def _hash_files(root: Path, rel_paths: Sequence[str]) -> str:
    h = hashlib.sha256()
    for rel in sorted(rel_paths):
        h.update(rel.encode())
        h.update((root / rel).read_bytes())
    return h.hexdigest()


def _spec_key(spec: SceneSpec) -> str:
    return hashlib.sha256(repr(spec).encode()).hexdigest()[:16]


def generate_dataset(variety: str, n_scenes: int, views_per_scene: int, seed: int, out_dir,
                     resolution: tuple = (64, 64), name: str = "") -> DatasetManifest:
    """Render, write ``images/`` and ``depth/`` plus ``manifest.json``."""
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "depth").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    entries, rels = [], []
    for si, views in random_scene_specs(variety, n_scenes, views_per_scene, seed, resolution):
        for vi, spec in enumerate(views):
            sample = render_scene(spec, resolution)
            stem = f"s{si:03d}_v{vi:03d}"
            img_rel, dep_rel = f"images/{stem}.ppm", f"depth/{stem}.pfm"
            try:
                save_rgbd(sample, root / img_rel, root / dep_rel)
            except OSError as exc:
                raise OSError(f"cannot write {root / img_rel}: {exc}") from exc
            entries.append(dict(
                image=img_rel, depth=dep_rel, scene_id=f"s{si:03d}", view_id=f"v{vi:03d}",
                intrinsics=spec.intrinsics.to_dict(), spec_key=_spec_key(spec),
            ))
            rels += [img_rel, dep_rel]
    manifest = DatasetManifest(
        name=name or root.name, variety=variety, samples=entries,
        content_hash=_hash_files(root, rels), resolution=tuple(resolution), seed=seed, root=str(root),
    )
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


def read_manifest(root) -> DatasetManifest:
    """Read ``manifest.json``; without one, index any ``images/*.ppm`` + ``depth/*.pfm`` pairs."""
    root = Path(root)
    mpath = root / "manifest.json"
    if mpath.exists():
        d = json.loads(mpath.read_text())
        d["resolution"] = tuple(d.get("resolution", (0, 0)))
        m = DatasetManifest(**d)
        m.root = str(root)
        return m
    if not (root / "images").is_dir():
        raise OSError(f"{root}: neither manifest.json nor an images/ directory")
    entries, rels = [], []
    for img in sorted((root / "images").glob("*.ppm")):
        dep = root / "depth" / (img.stem + ".pfm")
        if not dep.exists():
            raise OSError(f"missing depth map {dep}")
        scene, _, view = img.stem.partition("_")
        entries.append(dict(image=f"images/{img.name}", depth=f"depth/{dep.name}", scene_id=scene, view_id=view))
        rels += [entries[-1]["image"], entries[-1]["depth"]]
    return DatasetManifest(root.name, "unknown", entries, _hash_files(root, rels), root=str(root))


def load_dataset(root) -> Dataset:
    m = read_manifest(root)
    base = Path(m.root)
    samples = [load_rgbd(base / e["image"], base / e["depth"], e["scene_id"], e["view_id"]) for e in m.samples]
    if not samples:
        raise OSError(f"{root}: dataset has no samples")
    return Dataset(samples, name=m.name)
