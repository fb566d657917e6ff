"""Synthetic dynamic scenes with exact flow, masks, features and poses.

World coordinates coincide with the first camera: x right, y down, z forward.
The static world is a back wall, a floor and a few fronto-parallel pillars,
so the static structure is never a single plane. Dynamic objects are
fronto-parallel rectangles translating rigidly, optionally with an in-plane
swirl that makes their motion non-rigid.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import GenerationError
from .trajectory import Trajectory, axis_angle_matrix, matrix_to_quat

log = logging.getLogger(__name__)

DEFAULT_SPEC = {
    "frames": 10,
    "width": 96,
    "height": 72,
    "focal": 80.0,
    "camera": {"path": "line", "speed": 0.08, "direction": [1.0, 0.0, 0.0], "turn": 0.2},
    "scene": {"wall_depth": 6.0, "floor_height": 1.4, "pillars": 3},
    "objects": [],
    "features": {"channels": 16, "stride": 2, "separation": 6.0, "noise": 1.0},
    "flow_noise": 0.0,
    "seed": 0,
}

OBJECT_DEFAULTS = {"coverage": 0.1, "depth": 2.0, "velocity": [0.0, 0.075, 0.0], "swirl": 0.0}
CAMERA_PATHS = ("line", "arc", "rotation")


def reference_spec(seed: int = 0) -> dict:
    """The standard dynamic scene: one object covering 15% of each frame."""
    spec = copy.deepcopy(DEFAULT_SPEC)
    spec["seed"] = seed
    spec["flow_noise"] = 0.05
    spec["objects"] = [{"coverage": 0.15, "depth": 2.0, "velocity": [0.0, 0.075, 0.0]}]
    return spec


def occluder_spec(seed: int = 0, coverage: float = 0.6, side_scale: float = 1.0) -> dict:
    """Reference scene whose last frame is mostly hidden by four approaching objects.

    The objects sit in the four image quadrants, keep pace with the camera
    sideways, drift vertically in opposite directions and swirl in opposite
    senses, so no single two-view geometry explains them. They approach fast
    enough that only the final frame is dominated by them; ``coverage`` is the
    nominal dynamic share of that frame before perspective growth, scaled by
    ``side_scale``.
    """
    spec = reference_spec(seed)
    T, W, H, f = spec["frames"], spec["width"], spec["height"], spec["focal"]
    speed = spec["camera"]["speed"]
    cx, cy = (W - 1) / 2, (H - 1) / 2
    z_last, vz, vy, swirl = 1.0, 0.3, 0.04, 0.5
    z0 = z_last + (T - 1) * vz
    side = side_scale * np.sqrt(coverage / 4 * W * H) * z_last / f
    objects = []
    for i, (qu, qv) in enumerate([(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]):
        sign = 1.0 if i in (0, 3) else -1.0
        # world position at the last frame, then walked back to frame 0
        x0 = (qu * W - cx) * z_last / f
        y0 = (qv * H - cy) * z_last / f - (T - 1) * sign * vy
        objects.append({
            "depth": z0,
            "velocity": [speed, sign * vy, -vz],
            "swirl": swirl * (1.0 if i % 2 else -1.0),
            "center": [f * x0 / z0 + cx, f * y0 / z0 + cy],
            "size": [side, side],
        })
    spec["objects"] = objects
    return spec


def merge_spec(user: dict | None) -> dict:
    spec = copy.deepcopy(DEFAULT_SPEC)
    for key, value in (user or {}).items():
        if key not in spec:
            raise GenerationError(f"unknown scene key {key!r}")
        if isinstance(spec[key], dict):
            if not isinstance(value, dict):
                raise GenerationError(f"{key} must be an object")
            unknown = set(value) - set(spec[key])
            if unknown:
                raise GenerationError(f"unknown {key} keys: {sorted(unknown)}")
            spec[key].update(value)
        else:
            spec[key] = value
    objects = []
    for obj in spec["objects"]:
        unknown = set(obj) - set(OBJECT_DEFAULTS) - {"center", "size"}
        if unknown:
            raise GenerationError(f"unknown object keys: {sorted(unknown)}")
        objects.append({**copy.deepcopy(OBJECT_DEFAULTS), **obj})
    spec["objects"] = objects
    return spec


# ---------------------------------------------------------------- geometry

@dataclass
class Rect:
    """Bounded planar rectangle ``center + a*half_u + b*half_v``, |a|,|b| <= 1."""

    center: np.ndarray
    half_u: np.ndarray
    half_v: np.ndarray

    def intersect(self, origin, dirs):
        normal = np.cross(self.half_u, self.half_v)
        denom = dirs @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.center - origin) @ normal) / denom
        hit = origin + s[:, None] * dirs
        rel = hit - self.center
        a = rel @ self.half_u / (self.half_u @ self.half_u)
        b = rel @ self.half_v / (self.half_v @ self.half_v)
        ok = np.isfinite(s) & (s > 1e-9) & (np.abs(a) <= 1) & (np.abs(b) <= 1)
        return np.where(ok, s, np.inf), a, b


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.point - origin) @ self.normal) / denom
        ok = np.isfinite(s) & (s > 1e-9)
        zeros = np.zeros_like(s)
        return np.where(ok, s, np.inf), zeros, zeros


@dataclass
class MovingObject:
    rect: Rect  # pose at frame 0
    velocity: np.ndarray  # world metres per frame
    swirl: float = 0.0  # radians per frame at the centre

    def at(self, t: float) -> Rect:
        return Rect(self.rect.center + self.velocity * t, self.rect.half_u, self.rect.half_v)

    def carry(self, a, b, dt: float):
        """Local coordinates after ``dt`` frames of in-plane swirl."""
        if self.swirl == 0.0:
            return a, b
        r2 = a * a + b * b
        weight = np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)
        ang = self.swirl * dt * weight
        c, s = np.cos(ang), np.sin(ang)
        return c * a - s * b, s * a + c * b


@dataclass
class SyntheticScene:
    K: np.ndarray
    rotations: np.ndarray  # (T, 3, 3) world -> camera
    translations: np.ndarray  # (T, 3) world -> camera
    static_surfaces: list
    objects: list[MovingObject]
    size: tuple[int, int]  # (H, W)
    spec: dict

    @property
    def frames(self) -> int:
        return len(self.rotations)

    def centers(self) -> np.ndarray:
        return -np.einsum("tji,tj->ti", self.rotations, self.translations)

    def project(self, X: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        Xc = X @ self.rotations[t].T + self.translations[t]
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = (Xc @ self.K.T)[:, :2] / z[:, None]
        return uv, z

    def fundamental(self, t: int, t2: int) -> np.ndarray:
        """Ground-truth F with ``h(x_t2)^T F h(x_t) = 0``."""
        from .epipolar import normalize_fundamental

        R = self.rotations[t2] @ self.rotations[t].T
        tr = self.translations[t2] - R @ self.translations[t]
        tx = np.array([[0, -tr[2], tr[1]], [tr[2], 0, -tr[0]], [-tr[1], tr[0], 0]])
        Kinv = np.linalg.inv(self.K)
        F = Kinv.T @ tx @ R @ Kinv
        if not np.any(F):
            return F
        return normalize_fundamental(F)

    def trajectory(self) -> Trajectory:
        R_cw = np.transpose(self.rotations, (0, 2, 1))
        return Trajectory(np.arange(self.frames, dtype=np.float64), self.centers(),
                          matrix_to_quat(R_cw))


@dataclass
class SceneTruth:
    fwd: list  # fwd[t]: flow t -> t+1, None for the last frame
    bwd: list  # bwd[t]: flow t -> t-1, None for the first frame
    features: list
    masks: list  # per-frame bool, True on dynamic pixels
    object_ids: list  # per-frame int, 0 static, k for object k
    fundamentals: dict = field(default_factory=dict)  # (t, t2) -> F
    degenerate: bool = False

    @property
    def coverage(self) -> np.ndarray:
        return np.array([m.mean() for m in self.masks])


# ---------------------------------------------------------------- generation

def _camera_poses(spec: dict):
    cam = spec["camera"]
    path = cam["path"]
    if path not in CAMERA_PATHS:
        raise GenerationError(f"camera path must be one of {CAMERA_PATHS}, got {path!r}")
    T = spec["frames"]
    direction = np.asarray(cam["direction"], dtype=np.float64)
    if path != "rotation" and (cam["speed"] <= 0 or not np.any(direction)):
        raise GenerationError("translating camera paths need a nonzero speed and direction")
    direction = direction / np.linalg.norm(direction) if np.any(direction) else direction
    Rs, ts = [], []
    for t in range(T):
        turn = np.deg2rad(cam["turn"]) * t if path in ("arc", "rotation") else 0.0
        R_cw = axis_angle_matrix([0.0, 1.0, 0.0], turn) if turn else np.eye(3)
        C = np.zeros(3) if path == "rotation" else cam["speed"] * t * direction
        R = R_cw.T
        Rs.append(R)
        ts.append(-R @ C)
    return np.array(Rs), np.array(ts)


def build_scene(spec: dict) -> SyntheticScene:
    spec = merge_spec(spec)
    T, W, H, f = spec["frames"], spec["width"], spec["height"], float(spec["focal"])
    if T < 2:
        raise GenerationError("need at least two frames")
    if f <= 0 or W < 8 or H < 8:
        raise GenerationError("focal length and frame size must be positive (>= 8 px)")
    stride = spec["features"]["stride"]
    if W % stride or H % stride:
        raise GenerationError(f"frame size {W}x{H} is not divisible by feature stride {stride}")
    rng = np.random.default_rng(spec["seed"])
    K = np.array([[f, 0, (W - 1) / 2], [0, f, (H - 1) / 2], [0, 0, 1.0]])
    Kinv = np.linalg.inv(K)
    Rs, ts = _camera_poses(spec)

    geo = spec["scene"]
    wall, floor = float(geo["wall_depth"]), float(geo["floor_height"])
    surfaces = [Plane(np.array([0, 0, wall]), np.array([0, 0, 1.0])),
                Plane(np.array([0, floor, 0]), np.array([0, 1.0, 0]))]
    for _ in range(int(geo["pillars"])):
        z = rng.uniform(0.45, 0.7) * wall
        x = rng.uniform(-0.5, 0.5) * z * W / (2 * f)
        half_w = rng.uniform(0.08, 0.14) * z * W / (2 * f)
        surfaces.append(Rect(np.array([x, floor - 1.5, z]), np.array([half_w, 0, 0]),
                             np.array([0, 1.5, 0])))

    objects = []
    for obj in spec["objects"]:
        z = float(obj["depth"])
        if z <= 0:
            raise GenerationError("object depth must be positive")
        vel = np.asarray(obj["velocity"], dtype=np.float64)
        if "size" in obj:
            half = np.asarray(obj["size"], dtype=np.float64) / 2
        else:
            side_px = np.sqrt(obj["coverage"] * W * H)
            half = np.array([side_px, side_px]) * z / f / 2
        if "center" in obj:
            u0, v0 = obj["center"]
        else:
            # centre the traversal so the object stays in view
            drift = f * vel[:2] / z * (T - 1) / 2
            u0 = rng.uniform(0.4, 0.6) * W - drift[0] + spec["camera"]["speed"] * f / z * (T - 1) / 2
            v0 = H / 2 - drift[1]
        center = z * (Kinv @ np.array([u0, v0, 1.0]))
        rect = Rect(center, np.array([half[0], 0, 0]), np.array([0, half[1], 0]))
        objects.append(MovingObject(rect, vel, float(obj["swirl"])))
    return SyntheticScene(K, Rs, ts, surfaces, objects, (H, W), spec)


def _render(scene: SyntheticScene, t: int):
    """Ray-cast frame ``t``: world hit points, surface ids and object-local coords."""
    H, W = scene.size
    ys, xs = np.mgrid[0:H, 0:W]
    pix = np.stack([xs.ravel(), ys.ravel(), np.ones(H * W)], axis=1).astype(np.float64)
    R_cw = scene.rotations[t].T
    dirs = pix @ np.linalg.inv(scene.K).T @ R_cw.T
    origin = scene.centers()[t]
    best = np.full(H * W, np.inf)
    ident = np.zeros(H * W, dtype=np.int64)
    local = np.zeros((H * W, 2))
    for surf in scene.static_surfaces:
        s, _, _ = surf.intersect(origin, dirs)
        closer = s < best
        best[closer] = s[closer]
        ident[closer] = 0
    for k, obj in enumerate(scene.objects, 1):
        s, a, b = obj.at(t).intersect(origin, dirs)
        closer = s < best
        best[closer] = s[closer]
        ident[closer] = k
        local[closer] = np.stack([a[closer], b[closer]], axis=1)
    if not np.all(np.isfinite(best)):
        raise GenerationError(f"frame {t}: some rays hit no surface")
    X = origin + best[:, None] * dirs
    return X, ident, local, pix[:, :2]


def _flow(scene: SyntheticScene, t: int, t2: int, rendered) -> np.ndarray:
    X, ident, local, pix = rendered
    target = X.copy()
    for k, obj in enumerate(scene.objects, 1):
        sel = ident == k
        if not sel.any():
            continue
        a, b = obj.carry(local[sel, 0], local[sel, 1], t2 - t)
        rect = obj.at(t2)
        target[sel] = rect.center + a[:, None] * rect.half_u + b[:, None] * rect.half_v
    uv, z = scene.project(target, t2)
    if np.any(z <= 1e-6):
        raise GenerationError(f"points visible in frame {t} fall behind camera {t2}")
    H, W = scene.size
    return (uv - pix).reshape(H, W, 2)


def _features(scene: SyntheticScene, ident_maps, rng):
    fs = scene.spec["features"]
    C, stride = int(fs["channels"]), int(fs["stride"])
    H, W = scene.size
    n_clusters = len(scene.objects) + 1
    directions = rng.normal(size=(n_clusters, C))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * fs["separation"]
    means[0] = 0.0
    out = []
    for ident in ident_maps:
        cells = ident.reshape(H // stride, stride, W // stride, stride).transpose(0, 2, 1, 3)
        cells = cells.reshape(H // stride, W // stride, -1)
        counts = np.stack([(cells == k).sum(axis=-1) for k in range(n_clusters)], axis=-1)
        label = np.argmax(counts, axis=-1)
        feat = means[label] + fs["noise"] * rng.normal(size=label.shape + (C,))
        out.append(feat.astype(np.float32))
    return out


def generate(spec: dict | None = None, seed: int | None = None):
    """Build and render a scene; returns ``(SyntheticScene, SceneTruth)``."""
    spec = merge_spec(spec)
    if seed is not None:
        spec["seed"] = seed
    scene = build_scene(spec)
    rng = np.random.default_rng([spec["seed"], 1])
    T = scene.frames
    H, W = scene.size
    renders = [_render(scene, t) for t in range(T)]
    noise = float(spec["flow_noise"])
    fwd, bwd = [None] * T, [None] * T
    for t in range(T):
        if t + 1 < T:
            fwd[t] = _flow(scene, t, t + 1, renders[t])
        if t > 0:
            bwd[t] = _flow(scene, t, t - 1, renders[t])
    for t in range(T):
        for flows in (fwd, bwd):
            if flows[t] is not None:
                if noise > 0:
                    flows[t] = flows[t] + rng.normal(scale=noise, size=flows[t].shape)
                flows[t] = flows[t].astype(np.float32)
    ident_maps = [r[1].reshape(H, W) for r in renders]
    features = _features(scene, ident_maps, rng)
    fundamentals = {}
    for t in range(T - 1):
        fundamentals[(t, t + 1)] = scene.fundamental(t, t + 1)
        fundamentals[(t + 1, t)] = scene.fundamental(t + 1, t)
    degenerate = spec["camera"]["path"] == "rotation"
    truth = SceneTruth(fwd, bwd, features, [m > 0 for m in ident_maps], ident_maps,
                       fundamentals, degenerate)
    return scene, truth


def export(scene: SyntheticScene, truth: SceneTruth, out_dir) -> None:
    """Write the bundle in the same formats the segmenter consumes."""
    out = Path(out_dir)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    T = scene.frames
    for t in range(T):
        if truth.fwd[t] is not None:
            io.write_tensor(truth.fwd[t], out / io.FLOW_FWD.format(t))
        if truth.bwd[t] is not None:
            io.write_tensor(truth.bwd[t], out / io.FLOW_BWD.format(t))
        io.write_tensor(truth.features[t], out / io.FEATURE.format(t))
        io.write_mask(truth.masks[t], out / "gt" / io.MASK.format(t))
    io.write_trajectory(scene.trajectory(), out / "groundtruth.txt")
    manifest = {
        "spec": scene.spec,
        "frames": T,
        "height": scene.size[0],
        "width": scene.size[1],
        "intrinsics": scene.K.tolist(),
        "degenerate": truth.degenerate,
        "coverage": truth.coverage.round(6).tolist(),
        "fundamentals": {f"{a}->{b}": F.tolist() for (a, b), F in truth.fundamentals.items()},
    }
    (out / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- sparse two-view data

def two_view_points(n_static: int = 1000, n_dynamic: int = 0, seed: int = 0, *,
                    rotation_only: bool = False, displacement=(2.0, 10.0),
                    focal: float = 500.0, size=(480, 640)):
    """Exact sparse correspondences between two random cameras.

    Dynamic points are pushed off their epipolar line by ``displacement`` px
    (uniform range). Returns ``(x1, x2, is_static, F, K)`` with F in the
    ``h(x2)^T F h(x1) = 0`` orientation.
    """
    from .epipolar import normalize_fundamental

    rng = np.random.default_rng(seed)
    H, W = size
    K = np.array([[focal, 0, W / 2], [0, focal, H / 2], [0, 0, 1.0]])
    n = n_static + n_dynamic
    uv = np.stack([rng.uniform(0, W, n), rng.uniform(0, H, n)], axis=1)
    depth = rng.uniform(4.0, 12.0, n)
    X = depth[:, None] * (np.hstack([uv, np.ones((n, 1))]) @ np.linalg.inv(K).T)
    R = axis_angle_matrix(rng.normal(size=3), np.deg2rad(rng.uniform(1.0, 4.0)))
    if rotation_only:
        tr = np.zeros(3)
    else:
        tr = rng.normal(size=3)
        tr = 0.4 * tr / np.linalg.norm(tr)
    Xc = X @ R.T + tr
    if np.any(Xc[:, 2] <= 0):
        raise GenerationError("points behind the second camera")
    proj = Xc @ K.T
    x2 = proj[:, :2] / proj[:, 2:]
    tx = np.array([[0, -tr[2], tr[1]], [tr[2], 0, -tr[0]], [-tr[1], tr[0], 0]])
    Kinv = np.linalg.inv(K)
    F = Kinv.T @ tx @ R @ Kinv
    if np.any(F):
        F = normalize_fundamental(F)
    is_static = np.arange(n) < n_static
    if n_dynamic:
        if rotation_only:
            off = rng.normal(size=(n_dynamic, 2))
        else:
            lines = np.hstack([uv[~is_static], np.ones((n_dynamic, 1))]) @ F.T
            off = lines[:, :2]
        off /= np.linalg.norm(off, axis=1, keepdims=True)
        mag = rng.uniform(*displacement, n_dynamic)
        x2[~is_static] += off * mag[:, None] * rng.choice([-1.0, 1.0], n_dynamic)[:, None]
    return uv, x2, is_static, F, K
