"""Procedural toy scenes and an analytic G-buffer renderer.

The renderer is orthographic, looking down -z, with directional lights and no
shadows. Shading per pixel::

    E    = ambient + sum_i I_i * max(0, n.l_i)
    spec = sum_i I_i * (0.04 (1 - m) + a m) * max(0, n.h_i) ** (2 / max(r, 0.05)**2)
    rgb  = clamp(a * E * (1 - m) + spec, 0, 1)

E excludes the specular term, so rgb is not simply a * E.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ouro.core import (
    PROFILE_MASKS,
    Caption,
    ChannelMask,
    Colorspace,
    DatasetRecord,
    ImageTensor,
    IntrinsicSet,
    Profile,
    decode_normal,
    encode_normal,
    write_record,
)

log = logging.getLogger(__name__)

SHAPES = ("sphere", "box", "plane")
VIEW = np.array([0.0, 0.0, 1.0])
ROUGHNESS_FLOOR = 0.05
BACKDROP_DEPTH = -10.0

PALETTE = {
    "red": (0.80, 0.12, 0.10),
    "green": (0.15, 0.65, 0.20),
    "blue": (0.12, 0.25, 0.80),
    "yellow": (0.85, 0.80, 0.15),
    "orange": (0.90, 0.45, 0.10),
    "purple": (0.50, 0.20, 0.65),
    "cyan": (0.15, 0.70, 0.75),
    "white": (0.90, 0.90, 0.88),
    "gray": (0.50, 0.50, 0.50),
    "brown": (0.45, 0.28, 0.15),
}


@dataclass
class SceneObject:
    shape: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    albedo: tuple[float, float, float]
    roughness: float
    metallicity: float
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # xyz Euler angles, radians


@dataclass
class Light:
    direction: tuple[float, float, float]
    intensity: tuple[float, float, float]


@dataclass
class Camera:
    center: tuple[float, float] = (0.0, 0.0)
    half_extent: float = 1.0
    resolution: int = 64


@dataclass
class Material:
    albedo: tuple[float, float, float] = (0.5, 0.5, 0.5)
    roughness: float = 1.0
    metallicity: float = 0.0


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    lights: list[Light]
    ambient: tuple[float, float, float]
    camera: Camera = field(default_factory=Camera)
    backdrop: Material = field(default_factory=Material)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            objects=[SceneObject(**{k: tuple(v) if isinstance(v, list) else v for k, v in o.items()})
                     for o in d["objects"]],
            lights=[Light(tuple(l["direction"]), tuple(l["intensity"])) for l in d["lights"]],
            ambient=tuple(d["ambient"]),
            camera=Camera(tuple(d["camera"]["center"]), d["camera"]["half_extent"], d["camera"]["resolution"]),
            backdrop=Material(tuple(d["backdrop"]["albedo"]), d["backdrop"]["roughness"],
                              d["backdrop"]["metallicity"]),
        )


@dataclass
class SceneConfig:
    shapes: tuple[str, ...] = SHAPES
    shape_weights: tuple[float, ...] | None = None
    min_objects: int = 1
    max_objects: int = 6
    min_lights: int = 1
    max_lights: int = 3
    roughness_range: tuple[float, float] = (0.2, 1.0)
    metallic_prob: float = 0.35
    intensity_range: tuple[float, float] = (0.3, 0.9)
    ambient_range: tuple[float, float] = (0.05, 0.25)
    min_light_elevation: float = 0.3  # minimum z of light directions

    def validate(self) -> None:
        if not self.shapes or set(self.shapes) - set(SHAPES):
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        if not 1 <= self.min_objects <= self.max_objects <= 6:
            raise ValueError("object counts must satisfy 1 <= min <= max <= 6")
        if not 1 <= self.min_lights <= self.max_lights <= 3:
            raise ValueError("light counts must satisfy 1 <= min <= max <= 3")
        lo, hi = self.roughness_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("roughness_range must lie in [0, 1]")
        if not 0.0 <= self.min_light_elevation < 1.0:
            raise ValueError("min_light_elevation must lie in [0, 1)")


PROFILE_CONFIGS = {
    Profile.INDOOR: SceneConfig(shape_weights=(0.45, 0.35, 0.20)),
    Profile.CITY: SceneConfig(shape_weights=(0.10, 0.75, 0.15), intensity_range=(0.5, 1.0)),
    Profile.WILD: SceneConfig(),
}


def _rotation(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _unit(v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=np.float64)
    return tuple(float(x) for x in v / np.linalg.norm(v))


def sample_scene(seed: int, config: SceneConfig | None = None, resolution: int = 64) -> SceneSpec:
    """Draw a random scene; the result depends only on ``(seed, config, resolution)``."""
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    names = list(PALETTE)

    def material():
        base = np.array(PALETTE[names[rng.integers(len(names))]])
        albedo = np.clip(base + rng.uniform(-0.05, 0.05, 3), 0.02, 0.98)
        rough = float(rng.uniform(*cfg.roughness_range))
        u = rng.random()
        if u >= cfg.metallic_prob:
            metal = 0.0
        elif u < cfg.metallic_prob * 0.4:
            metal = 1.0
        else:
            metal = float(rng.uniform(0.0, 1.0))
        return tuple(float(a) for a in albedo), rough, metal

    weights = np.asarray(cfg.shape_weights if cfg.shape_weights is not None
                         else np.ones(len(cfg.shapes)), dtype=np.float64)
    if len(weights) != len(cfg.shapes):
        weights = np.ones(len(cfg.shapes))
    weights = weights / weights.sum()
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n_obj):
        shape = cfg.shapes[int(rng.choice(len(cfg.shapes), p=weights))]
        albedo, rough, metal = material()
        if shape == "sphere":
            r = float(rng.uniform(0.15, 0.45))
            center = (float(rng.uniform(-0.7, 0.7)), float(rng.uniform(-0.7, 0.7)), float(rng.uniform(0.0, 1.0)))
            obj = SceneObject("sphere", center, (r, r, r), albedo, rough, metal)
        elif shape == "box":
            size = tuple(float(s) for s in rng.uniform(0.1, 0.35, 3))
            center = (float(rng.uniform(-0.7, 0.7)), float(rng.uniform(-0.7, 0.7)), float(rng.uniform(0.0, 1.0)))
            rot = tuple(float(a) for a in rng.uniform(-np.pi / 3, np.pi / 3, 3))
            obj = SceneObject("box", center, size, albedo, rough, metal, rot)
        else:
            center = (0.0, float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-1.0, -0.5)))
            rot = (float(rng.uniform(-0.7, 0.0)), float(rng.uniform(-0.3, 0.3)), 0.0)
            obj = SceneObject("plane", center, (1.0, 1.0, 1.0), albedo, rough, metal, rot)
        objects.append(obj)

    lights = []
    for _ in range(int(rng.integers(cfg.min_lights, cfg.max_lights + 1))):
        z = rng.uniform(cfg.min_light_elevation, 1.0)
        phi = rng.uniform(0, 2 * np.pi)
        rho = np.sqrt(max(0.0, 1 - z * z))
        d = _unit((rho * np.cos(phi), rho * np.sin(phi), z))
        tint = rng.uniform(0.85, 1.0, 3)
        intensity = tuple(float(v) for v in tint * rng.uniform(*cfg.intensity_range))
        lights.append(Light(d, intensity))
    ambient = tuple(float(v) for v in np.full(3, rng.uniform(*cfg.ambient_range)))
    backdrop_albedo, _, _ = material()
    backdrop = Material(backdrop_albedo, 1.0, 0.0)
    return SceneSpec(objects, lights, ambient, Camera(resolution=resolution), backdrop)


def check_scene(s: SceneSpec) -> list[str]:
    problems = []
    if not 1 <= len(s.objects) <= 6:
        problems.append(f"{len(s.objects)} objects (expected 1-6)")
    if not 1 <= len(s.lights) <= 3:
        problems.append(f"{len(s.lights)} lights (expected 1-3)")
    for i, o in enumerate(s.objects):
        if o.shape not in SHAPES:
            problems.append(f"object {i}: unknown shape {o.shape!r}")
        vals = [*o.albedo, o.roughness, o.metallicity]
        if min(vals) < 0 or max(vals) > 1:
            problems.append(f"object {i}: material parameter outside [0, 1]")
    for i, l in enumerate(s.lights):
        if abs(np.linalg.norm(l.direction) - 1.0) > 1e-6:
            problems.append(f"light {i}: direction not unit length")
        if min(l.intensity) < 0:
            problems.append(f"light {i}: negative intensity")
    if min(s.ambient) < 0:
        problems.append("negative ambient")
    return problems


# --- rendering ------------------------------------------------------------

@dataclass
class RenderOutput:
    rgb: ImageTensor
    intrinsics: IntrinsicSet
    scene: SceneSpec


def _pixel_grid(cam: Camera, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    u = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    xs = cam.center[0] + cam.half_extent * u
    ys = cam.center[1] - cam.half_extent * u
    return np.meshgrid(xs, ys)


def _intersect(obj: SceneObject, x: np.ndarray, y: np.ndarray):
    """Front-most hit depth (-inf where missed) and world normals."""
    c = np.asarray(obj.center, dtype=np.float64)
    depth = np.full(x.shape, -np.inf)
    normal = np.zeros(x.shape + (3,))
    if obj.shape == "sphere":
        r = obj.size[0]
        dx, dy = x - c[0], y - c[1]
        d2 = dx * dx + dy * dy
        hit = d2 < r * r
        dz = np.sqrt(np.where(hit, r * r - d2, 0.0))
        depth[hit] = c[2] + dz[hit]
        normal[..., 0], normal[..., 1], normal[..., 2] = dx / r, dy / r, dz / r
    elif obj.shape == "box":
        rot = _rotation(obj.rotation)
        half = np.asarray(obj.size, dtype=np.float64)
        origin = np.stack([x - c[0], y - c[1], np.full(x.shape, 100.0 - c[2])], axis=-1) @ rot
        direction = np.array([0.0, 0.0, -1.0]) @ rot
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(np.abs(direction) > 1e-12, 1.0 / direction, np.inf)
            t1 = (-half - origin) * inv
            t2 = (half - origin) * inv
        # parallel slabs: inside -> unbounded, outside -> empty
        parallel = np.abs(direction) <= 1e-12
        inside = np.abs(origin) <= half
        t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
        tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
        tnear = tmin.max(axis=-1)
        tfar = tmax.min(axis=-1)
        hit = (tnear <= tfar) & (tfar > 0)
        depth[hit] = 100.0 - tnear[hit]
        axis = tmin.argmax(axis=-1)
        local = np.zeros(x.shape + (3,))
        np.put_along_axis(local, axis[..., None], -np.sign(direction)[axis][..., None], axis=-1)
        normal = local @ rot.T
    elif obj.shape == "plane":
        nrm = _rotation(obj.rotation) @ np.array([0.0, 0.0, 1.0])
        if nrm[2] < 0:
            nrm = -nrm
        nz = max(nrm[2], 0.2)
        depth = c[2] - (nrm[0] * (x - c[0]) + nrm[1] * (y - c[1])) / nz
        normal[:] = nrm / np.linalg.norm(nrm)
    else:
        raise ValueError(f"unknown shape {obj.shape!r}")
    return depth, normal


def shade(normal, albedo, roughness, metallicity, lights, ambient):
    """Evaluate the analytic shading model; returns ``(irradiance, rgb)``."""
    n = np.asarray(normal, dtype=np.float64)
    a = np.asarray(albedo, dtype=np.float64)
    r = np.asarray(roughness, dtype=np.float64).reshape(n.shape[:-1] + (1,))
    m = np.asarray(metallicity, dtype=np.float64).reshape(n.shape[:-1] + (1,))
    E = np.broadcast_to(np.asarray(ambient, dtype=np.float64), n.shape).copy()
    spec = np.zeros(n.shape)
    exponent = 2.0 / np.maximum(r, ROUGHNESS_FLOOR) ** 2
    f0 = 0.04 * (1.0 - m) + a * m
    for light in lights:
        direction = light.direction if isinstance(light, Light) else light["direction"]
        intensity = light.intensity if isinstance(light, Light) else light["intensity"]
        l = np.asarray(direction, dtype=np.float64)
        I = np.asarray(intensity, dtype=np.float64)
        E += I * np.maximum(0.0, n @ l)[..., None]
        h = (l + VIEW) / np.linalg.norm(l + VIEW)
        spec += I * f0 * np.maximum(0.0, n @ h)[..., None] ** exponent
    rgb = np.clip(a * E * (1.0 - m) + spec, 0.0, 1.0)
    return E, rgb


def render_gbuffer(s: SceneSpec, resolution: int | None = None) -> RenderOutput:
    res = int(resolution or s.camera.resolution)
    if res < 16:
        raise ValueError(f"resolution {res} < 16")
    x, y = _pixel_grid(s.camera, res)
    depth = np.full(x.shape, BACKDROP_DEPTH)
    normal = np.zeros(x.shape + (3,))
    normal[..., 2] = 1.0
    albedo = np.broadcast_to(np.asarray(s.backdrop.albedo, dtype=np.float64), x.shape + (3,)).copy()
    rough = np.full(x.shape, float(s.backdrop.roughness))
    metal = np.full(x.shape, float(s.backdrop.metallicity))
    for obj in s.objects:
        d, nrm = _intersect(obj, x, y)
        win = d > depth
        depth[win] = d[win]
        normal[win] = nrm[win]
        albedo[win] = obj.albedo
        rough[win] = obj.roughness
        metal[win] = obj.metallicity
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    # shade the storage-quantized normals so stored intrinsics re-shade exactly
    normal = decode_normal(encode_normal(normal))
    albedo = albedo.astype(np.float32)
    rough = rough.astype(np.float32)[..., None]
    metal = metal.astype(np.float32)[..., None]
    E, rgb = shade(normal, albedo, rough, metal, s.lights, s.ambient)
    intr = IntrinsicSet(normal, albedo, rough, metal, E.astype(np.float32), ChannelMask.full())
    return RenderOutput(ImageTensor(rgb.astype(np.float32), Colorspace.LINEAR), intr, s)


def reshade(intrinsics: IntrinsicSet, lights, ambient) -> tuple[np.ndarray, np.ndarray]:
    x = intrinsics
    return shade(x.normal, x.albedo, x.roughness, x.metallicity, lights, ambient)


def pan_frames(s: SceneSpec, n_frames: int, step: float = 0.02, resolution: int | None = None,
               direction=(1.0, 0.0)) -> list[RenderOutput]:
    """Render a camera pan across ``s``; the camera moves ``step`` per frame."""
    out = []
    for k in range(n_frames):
        cam = replace(s.camera, center=(s.camera.center[0] + direction[0] * step * k,
                                        s.camera.center[1] + direction[1] * step * k))
        out.append(render_gbuffer(replace(s, camera=cam), resolution))
    return out


# --- captions -------------------------------------------------------------

def color_name(rgb) -> str:
    rgb = np.asarray(rgb, dtype=np.float64)
    return min(PALETTE, key=lambda k: float(np.sum((np.asarray(PALETTE[k]) - rgb) ** 2)))


def caption(s: SceneSpec) -> Caption:
    parts = [f"a {color_name(o.albedo)} {o.shape}" for o in s.objects]
    body = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    return Caption(f"{body} under {len(s.lights)} lights")


# --- datasets -------------------------------------------------------------

def record_seeds(n: int, seed: int) -> list[int]:
    return [int(v) for v in np.random.SeedSequence(seed).generate_state(n)]


def make_record(rid: str, seed: int, profile: Profile, resolution: int = 64,
                config: SceneConfig | None = None) -> DatasetRecord:
    profile = Profile(profile)
    scene = sample_scene(seed, config or PROFILE_CONFIGS[profile], resolution)
    out = render_gbuffer(scene, resolution)
    mask = PROFILE_MASKS[profile]
    meta = {
        "seed": seed,
        "resolution": resolution,
        "lights": [asdict(l) for l in scene.lights],
        "ambient": list(scene.ambient),
    }
    return DatasetRecord(rid, out.rgb, out.intrinsics.masked(mask), caption(scene), profile, meta)


def build_dataset(n: int, seed: int, out_root: str | os.PathLike, profile: Profile | str,
                  resolution: int = 64, split: str = "train", config: SceneConfig | None = None,
                  previews: bool = False, workers: int = 1) -> list[dict]:
    """Generate ``n`` records under ``out_root/split`` and write ``manifest.json``."""
    profile = Profile(profile)
    root = Path(out_root)
    seeds = record_seeds(n, seed)
    tag = {"indoor-like": "indoor", "city-like": "city", "wild": "wild"}[profile.value]
    manifest = [{"id": f"{tag}-{i:05d}", "seed": s, "profile": profile.value} for i, s in enumerate(seeds)]

    def one(entry):
        try:
            rec = make_record(entry["id"], entry["seed"], profile, resolution, config)
            write_record(root / split / entry["id"], rec, previews=previews)
        except OSError as exc:
            raise OSError(f"failed writing record {entry['id']}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(one, manifest))
    else:
        for entry in manifest:
            one(entry)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d %s records to %s", n, profile.value, root / split)
    return manifest
