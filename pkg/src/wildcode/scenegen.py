"""Procedural ground-truth scenes, pixel-count rasterization, attribute
fuzzing, a fixed synthetic feature model and dataset emission.

Frames. The world is Z-up with a flat ground at z = 0. A camera has a
position and a heading rotation ``Rz(yaw)``; it looks along the heading's +x
axis with no pitch or roll. Program ``loc`` values are object base points in
the camera's optical frame (x right, y up, z backward, so visible objects
have negative z). Program rotations are ``H.T @ R_world`` for heading ``H``.

Per scene: layout, ground texture and sun/atmosphere. Per view: camera pose,
lens value and the sun azimuth relative to the camera.
"""
from __future__ import annotations

import io
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from wildcode import codec, rotmath
from wildcode.assets import CATEGORIES, ORIENTABLE, AssetEntry, AssetIndex
from wildcode.scenelang import (
    MAX_OBJECTS,
    SCALAR_SETTERS,
    ObjectRecord,
    SceneAttributes,
    SceneProgram,
    emit_program,
    quantize_program,
)

# sampling ranges, also used to normalize attributes in the feature model
ATTRIBUTE_RANGES = {
    "sun_intensity": (0.5, 1.0),
    "sun_elevation": (0.1, 1.4),
    "sun_size": (0.2, 1.0),
    "camera": (20.0, 100.0),
    "atmospheric_density": (0.0, 0.02),
    "ozone": (0.0, 2.0),
    "sun_rotation": (0.0, 360.0),
    "dust": (0.0, 0.5),
    "sun_strength": (0.1, 1.0),
    "air": (0.2, 1.5),
}

# (height range in m, width / height)
CATEGORY_SHAPE = {
    "boulder": ((0.5, 2.0), 1.3),
    "bush": ((0.5, 1.5), 1.5),
    "tree": ((3.0, 9.0), 0.6),
    "carnivore": ((0.8, 1.5), 1.6),
    "herbivore": ((1.0, 2.5), 1.4),
    "bird": ((0.3, 0.6), 1.2),
}


@dataclass
class GenConfig:
    counts: dict = field(default_factory=lambda: {c: 5 for c in CATEGORIES})
    # inclusive (lo, hi); when set, each scene draws that many instances of random categories instead of counts
    objects_per_scene: tuple | None = None
    assets_per_category: int = 10
    pool_yaw_bins: int = 8
    n_ground: int = 10
    pool_seed: int = 0
    embed_dim: int = 768
    feature_dim: int = 512
    place_radius: float = 12.0
    cam_distance: tuple = (18.0, 30.0)
    cam_height: tuple = (1.0, 2.0)
    cam_yaw_jitter_deg: float = 15.0
    max_tilt_deg: float = 8.0
    fov_deg: float = 60.0
    resolution: int = 128
    seed: int = 0
    fuzz_fraction: float = 0.005
    max_objects: int = MAX_OBJECTS
    model_seed: int = 1234
    heldout_fraction: float = 0.1

    def __post_init__(self):
        self.counts = {c: int(self.counts.get(c, 0)) for c in CATEGORIES}
        self.cam_distance = tuple(self.cam_distance)
        self.cam_height = tuple(self.cam_height)
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("category counts must be >= 0")
        for name in ("cam_distance", "cam_height"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range is empty")
        if self.objects_per_scene is not None:
            self.objects_per_scene = tuple(int(v) for v in self.objects_per_scene)
            lo, hi = self.objects_per_scene
            if not 0 <= lo <= hi:
                raise ValueError("objects_per_scene range is empty")
        if self.fuzz_fraction < 0:
            raise ValueError("fuzz_fraction must be >= 0")
        if not 1 <= self.max_objects <= MAX_OBJECTS:
            raise ValueError(f"max_objects must be in [1, {MAX_OBJECTS}]")
        if self.pool_yaw_bins < 1 or rotmath.N_YAW_BINS % self.pool_yaw_bins:
            raise ValueError("pool_yaw_bins must divide 72")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> GenConfig:
        return cls(**d)


# -- asset pool -------------------------------------------------------------------

@dataclass(frozen=True)
class Asset:
    asset_id: int
    category: str
    height: float
    aspect: float


class AssetPool:
    """Pre-generated assets with per-yaw-bin appearance embeddings.

    Asset ids are a seeded permutation, so an id says nothing about its
    category. Embeddings are a category centroid plus an asset offset plus a
    smooth yaw-dependent term."""

    def __init__(self, cfg: GenConfig):
        rng = np.random.default_rng([cfg.pool_seed, 7])
        d = cfg.embed_dim
        self.dim = d
        self.n_bins = cfg.pool_yaw_bins
        n = cfg.assets_per_category * len(CATEGORIES)
        ids = rng.permutation(n)
        centroids = _unit(rng.normal(size=(len(CATEGORIES), d)))
        self.assets: list[Asset] = []
        self.index = AssetIndex(d)
        self.by_category: dict[str, list[int]] = {c: [] for c in CATEGORIES}
        for k, cat in enumerate(CATEGORIES):
            (h_lo, h_hi), aspect = CATEGORY_SHAPE[cat]
            for j in range(cfg.assets_per_category):
                aid = int(ids[k * cfg.assets_per_category + j])
                a = Asset(aid, cat, float(rng.uniform(h_lo, h_hi)), aspect * float(rng.uniform(0.85, 1.15)))
                self.assets.append(a)
                self.by_category[cat].append(aid)
                offset = 0.6 * _unit(rng.normal(size=d))
                u, v = 0.25 * _unit(rng.normal(size=(2, d)))
                for b in range(self.n_bins):
                    theta = 2 * math.pi * b / self.n_bins
                    emb = centroids[k] + offset + math.cos(theta) * u + math.sin(theta) * v
                    self.index.insert(AssetEntry(aid, cat, self.bin_index(b), emb))
        self._by_id = {a.asset_id: a for a in self.assets}
        self.ground = rng.normal(size=(cfg.n_ground, d)) / math.sqrt(d) * 1.5

    def bin_index(self, pool_bin: int) -> int:
        """72-bin index of the first yaw covered by a pool bin."""
        return pool_bin * (rotmath.N_YAW_BINS // self.n_bins)

    def pool_bin(self, yaw_deg: float) -> int:
        return rotmath.yaw_bin(yaw_deg) // (rotmath.N_YAW_BINS // self.n_bins)

    def asset(self, asset_id: int) -> Asset:
        return self._by_id[asset_id]

    def embedding(self, asset_id: int, yaw_deg: float) -> np.ndarray:
        return self.index.get(asset_id, self.bin_index(self.pool_bin(yaw_deg))).embedding


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@lru_cache(maxsize=8)
def _pool_cached(key: str) -> AssetPool:
    return AssetPool(GenConfig.from_json(json.loads(key)))


def get_pool(cfg: GenConfig) -> AssetPool:
    keep = ("assets_per_category", "pool_yaw_bins", "n_ground", "pool_seed", "embed_dim")
    return _pool_cached(json.dumps({k: getattr(cfg, k) for k in keep}, sort_keys=True))


# -- scenes -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    rotation: np.ndarray

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def right(self) -> np.ndarray:
        return -self.rotation[:, 1]

    @property
    def up(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def yaw_deg(self) -> float:
        return math.degrees(math.atan2(self.rotation[1, 0], self.rotation[0, 0]))


@dataclass(frozen=True, eq=False)
class Instance:
    asset_id: int
    category: str
    position: np.ndarray
    height: float
    rotation: np.ndarray
    aspect: float = 1.0


@dataclass(frozen=True, eq=False)
class Scene:
    camera: Camera
    attributes: SceneAttributes
    instances: tuple[Instance, ...]
    ground_id: int = 0
    sun_azimuth: float = 0.0


def _sample_attributes(rng) -> dict:
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ATTRIBUTE_RANGES.items()}


def sample_layout(cfg: GenConfig, rng: np.random.Generator, pool: AssetPool | None = None):
    """Instances, ground id and world-frame sun azimuth for one scene."""
    pool = pool or get_pool(cfg)
    instances = []
    tilt = math.radians(cfg.max_tilt_deg)
    if cfg.objects_per_scene is None:
        cats = [cat for cat in CATEGORIES for _ in range(cfg.counts[cat])]
    else:
        lo, hi = cfg.objects_per_scene
        cats = [CATEGORIES[k] for k in rng.integers(len(CATEGORIES), size=int(rng.integers(lo, hi + 1)))]
    for cat in cats:
        aid = int(rng.choice(pool.by_category[cat]))
        asset = pool.asset(aid)
        r = cfg.place_radius * math.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * math.pi)
        pos = np.array([r * math.cos(phi), r * math.sin(phi), 0.0])
        yaw = rng.uniform(-math.pi, math.pi)
        if cat in ORIENTABLE:
            rot = rotmath.rot_z(yaw)
        else:
            rot = rotmath.from_euler_zyx(yaw, rng.uniform(-tilt, tilt), rng.uniform(-tilt, tilt))
        height = asset.height * float(rng.uniform(0.9, 1.1))
        instances.append(Instance(aid, cat, pos, height, rot, asset.aspect))
    ground_id = int(rng.integers(cfg.n_ground))
    return tuple(instances), ground_id, _sample_attributes(rng)


def sample_camera(cfg: GenConfig, rng: np.random.Generator) -> tuple[Camera, float]:
    """Camera on a ring around the layout facing its center; returns (camera, lens)."""
    phi = rng.uniform(0, 2 * math.pi)
    dist = rng.uniform(*cfg.cam_distance)
    h = rng.uniform(*cfg.cam_height)
    pos = np.array([dist * math.cos(phi), dist * math.sin(phi), h])
    yaw = phi + math.pi + math.radians(rng.uniform(-cfg.cam_yaw_jitter_deg, cfg.cam_yaw_jitter_deg))
    lens = float(rng.uniform(*ATTRIBUTE_RANGES["camera"]))
    return Camera(pos, rotmath.rot_z(yaw)), lens


def make_view(layout, camera: Camera, lens: float, pool: AssetPool) -> Scene:
    instances, ground_id, world = layout
    attrs = dict(world)
    sun_azimuth = attrs.pop("sun_rotation")
    attrs["camera"] = lens
    attrs["sun_rotation"] = (sun_azimuth - camera.yaw_deg) % 360.0
    sa = SceneAttributes(**attrs, ground=pool.ground[ground_id])
    return Scene(camera, sa, instances, ground_id, sun_azimuth)


def sample_scene(cfg: GenConfig, rng: np.random.Generator, pool: AssetPool | None = None) -> Scene:
    pool = pool or get_pool(cfg)
    layout = sample_layout(cfg, rng, pool)
    camera, lens = sample_camera(cfg, rng)
    return make_view(layout, camera, lens, pool)


# -- rasterization ----------------------------------------------------------------

NEAR = 0.1


def _focal(resolution: int, fov_deg: float) -> float:
    return (resolution / 2) / math.tan(math.radians(fov_deg) / 2)


def rasterize_counts(scene: Scene, resolution: int = 128, fov_deg: float = 60.0) -> np.ndarray:
    """Visible pixel count per instance. Each instance is a camera-facing
    ellipse (its bounding ellipsoid's silhouette) at the depth of its center;
    the nearest ellipse owns a pixel, earlier instances win exact depth ties."""
    cam = scene.camera
    f = _focal(resolution, fov_deg)
    zbuf = np.full((resolution, resolution), np.inf)
    owner = np.full((resolution, resolution), -1, dtype=np.int64)
    centers = np.arange(resolution) + 0.5
    for i, inst in enumerate(scene.instances):
        c = inst.position + np.array([0.0, 0.0, inst.height / 2]) - cam.position
        depth = float(c @ cam.forward)
        if depth <= NEAR:
            continue
        u = resolution / 2 + f * float(c @ cam.right) / depth
        v = resolution / 2 - f * float(c @ cam.up) / depth
        a = f * inst.height * inst.aspect / 2 / depth
        b = f * inst.height / 2 / depth
        c0, c1 = max(0, math.floor(u - a)), min(resolution, math.ceil(u + a) + 1)
        r0, r1 = max(0, math.floor(v - b)), min(resolution, math.ceil(v + b) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        dx = (centers[c0:c1] - u) / a
        dy = (centers[r0:r1] - v) / b
        inside = dy[:, None] ** 2 + dx[None, :] ** 2 <= 1.0
        win = inside & (depth < zbuf[r0:r1, c0:c1])
        zbuf[r0:r1, c0:c1][win] = depth
        owner[r0:r1, c0:c1][win] = i
    return np.bincount(owner[owner >= 0], minlength=len(scene.instances))[: len(scene.instances)]


# -- scene -> program ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ViewObject:
    """Camera-frame ground truth for one visible instance."""
    instance: int
    asset_id: int
    category: str
    pixels: int
    loc: np.ndarray
    height: float
    rotation: np.ndarray
    yaw_deg: float


def view_objects(scene: Scene, counts: np.ndarray) -> list[ViewObject]:
    cam = scene.camera
    out = []
    for i, (inst, n) in enumerate(zip(scene.instances, counts)):
        if n <= 0:
            continue
        d = inst.position - cam.position
        loc = np.array([d @ cam.right, d @ cam.up, -(d @ cam.forward)])
        yaw = rotmath.camera_local_yaw_deg(inst.rotation, cam.rotation)
        rot = inst.rotation
        if inst.category not in ORIENTABLE:
            rot = rotmath.zero_yaw_camera_local(rot, cam.rotation)
        out.append(ViewObject(i, inst.asset_id, inst.category, int(n), loc, inst.height,
                              rotmath.camera_local(rot, cam.rotation), yaw))
    return out


def scene_to_program(scene: Scene, pool: AssetPool, cfg: GenConfig):
    """Saliency-ordered, truncated, quantized program plus per-object metadata."""
    counts = rasterize_counts(scene, cfg.resolution, cfg.fov_deg)
    objs = view_objects(scene, counts)
    records = [
        ObjectRecord(loc=tuple(float(v) for v in o.loc), height=o.height, pixels=o.pixels,
                     rotation=o.rotation, appearance=pool.embedding(o.asset_id, o.yaw_deg))
        for o in objs
    ]
    order = sorted(range(len(records)), key=lambda k: -records[k].pixels)[: cfg.max_objects]
    prog = SceneProgram(scene.attributes, tuple(records[k] for k in order))
    return quantize_program(prog), [objs[k] for k in order]


# -- fuzzing --------------------------------------------------------------------------

def fuzz_attributes(a: SceneAttributes, rng: np.random.Generator, fraction: float = 0.005) -> SceneAttributes:
    """Scale each scalar by ``1 + u``, ``u ~ U(-fraction, fraction)``; sun
    rotation wraps to [0, 360). The ground embedding is left alone."""
    if fraction < 0:
        raise ValueError("fraction must be >= 0")
    if fraction == 0:
        return a
    u = rng.uniform(-fraction, fraction, size=len(SCALAR_SETTERS))
    vals = a.scalars() * (1.0 + u)
    vals[SCALAR_SETTERS.index("sun_rotation")] %= 360.0
    return a.with_scalars(vals)


# -- synthetic feature model -----------------------------------------------------------

N_FREQ = 6
HIDDEN = 256


def _posenc(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    freqs = (2.0 ** np.arange(N_FREQ)) * math.pi
    ang = x[..., None] * freqs
    return np.concatenate([x, np.sin(ang).reshape(*x.shape[:-1], -1), np.cos(ang).reshape(*x.shape[:-1], -1)], -1)


@lru_cache(maxsize=8)
def _feature_weights(model_seed: int, in_dim: int, out_dim: int):
    rng = np.random.default_rng([model_seed, in_dim, out_dim])
    w1 = rng.normal(size=(HIDDEN, in_dim)) / math.sqrt(in_dim)
    b1 = rng.normal(size=HIDDEN) * 0.1
    w2 = rng.normal(size=(out_dim, HIDDEN)) / math.sqrt(HIDDEN)
    return w1, b1, w2


def _attribute_code(a: SceneAttributes) -> np.ndarray:
    x = np.array([(getattr(a, k) - lo) / (hi - lo) for k, (lo, hi) in ATTRIBUTE_RANGES.items()])
    return _posenc(x[None])[0]


def feature_dim(cfg: GenConfig) -> int:
    return cfg.feature_dim + len(ATTRIBUTE_RANGES) * (1 + 2 * N_FREQ) + cfg.embed_dim


def forward_features(scene: Scene, pool: AssetPool, model_seed: int, cfg: GenConfig) -> np.ndarray:
    """Order-invariant synthetic image features for a view.

    Each visible instance contributes a fixed random two-layer map of its
    appearance embedding and a sinusoidal code of (loc, height, log pixels);
    contributions are summed, then the attribute code and the ground
    embedding are appended."""
    counts = rasterize_counts(scene, cfg.resolution, cfg.fov_deg)
    objs = view_objects(scene, counts)
    geo_dim = 5 * (1 + 2 * N_FREQ)
    w1, b1, w2 = _feature_weights(model_seed, pool.dim + geo_dim, cfg.feature_dim)
    pooled = np.zeros(cfg.feature_dim)
    for o in objs:
        geo = np.array([o.loc[0] / 20, o.loc[1] / 5, o.loc[2] / 40, o.height / 10, math.log1p(o.pixels) / 10])
        x = np.concatenate([pool.embedding(o.asset_id, o.yaw_deg), _posenc(geo[None])[0]])
        pooled += w2 @ np.tanh(w1 @ x + b1)
    return np.concatenate([pooled, _attribute_code(scene.attributes), np.asarray(scene.attributes.ground)])


# -- dataset emission ---------------------------------------------------------------------

@dataclass
class Manifest:
    root: Path
    records: list[dict]
    config: GenConfig

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def path(self, rec: dict, key: str) -> Path:
        return self.root / rec[key]

    @classmethod
    def load(cls, root) -> Manifest:
        root = Path(root)
        cfg = GenConfig.from_json(json.loads((root / "gen_config.json").read_text()))
        with open(root / "manifest.jsonl") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        return cls(root, records, cfg)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _attr_dict(a: SceneAttributes) -> dict:
    return {k: float(getattr(a, k)) for k in SCALAR_SETTERS}


def _emit_scene(args) -> list[dict]:
    cfg, scene_id, views, out_dir, heldout = args
    pool = get_pool(cfg)
    layout = sample_layout(cfg, np.random.default_rng([cfg.seed, scene_id]), pool)
    records = []
    for view_id in range(views):
        seed = [cfg.seed, scene_id, view_id]
        rng = np.random.default_rng(seed)
        camera, lens = sample_camera(cfg, rng)
        scene = make_view(layout, camera, lens, pool)
        prog, meta = scene_to_program(scene, pool, cfg)
        fuzzed = fuzz_attributes(prog.attributes, rng, cfg.fuzz_fraction)
        feats = forward_features(scene, pool, cfg.model_seed, cfg).astype(np.float32)
        stem = f"s{scene_id:05d}_v{view_id:03d}"
        try:
            _atomic_write(out_dir / f"{stem}.rawcode", emit_program(prog).encode())
            _atomic_write(out_dir / f"{stem}.wcs", codec.to_bytes(codec.encode(prog)))
            _atomic_write(out_dir / f"{stem}.feat.npy", _npy_bytes(feats))
        except OSError as e:
            raise OSError(f"writing sample {stem} in {out_dir}: {e}") from e
        records.append({
            "sample_id": stem,
            "scene_id": scene_id,
            "view_id": view_id,
            "seed": seed,
            "split": "heldout" if heldout else "train",
            "program": f"{stem}.rawcode",
            "stream": f"{stem}.wcs",
            "features": f"{stem}.feat.npy",
            "ground_id": scene.ground_id,
            "attributes": _attr_dict(prog.attributes),
            "fuzzed_attributes": _attr_dict(fuzzed),
            "objects": [{"asset_id": o.asset_id, "category": o.category,
                         "yaw_bin": rotmath.yaw_bin(o.yaw_deg)} for o in meta],
        })
    return records


def emit_dataset(cfg: GenConfig, n_scenes: int, views_per_scene: int, out_dir, jobs: int = 1) -> Manifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_held = round(n_scenes * cfg.heldout_fraction)
    tasks = [(cfg, s, views_per_scene, out_dir, s >= n_scenes - n_held) for s in range(n_scenes)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            chunks = list(ex.map(_emit_scene, tasks, chunksize=8))
    else:
        chunks = [_emit_scene(t) for t in tasks]
    records = [r for chunk in chunks for r in chunk]
    pool = get_pool(cfg)
    pool.index.save(out_dir / "assets.wcae")
    _atomic_write(out_dir / "ground.npy", _npy_bytes(pool.ground.astype(np.float32)))
    _atomic_write(out_dir / "gen_config.json", (json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n").encode())
    body = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _atomic_write(out_dir / "manifest.jsonl", body.encode())
    return Manifest(out_dir, records, cfg)
