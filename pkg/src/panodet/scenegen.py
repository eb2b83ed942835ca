"""Synthetic LiDAR scenes for training and evaluation.

A beam grid (elevation fan x azimuth sweep) is ray-cast from the sensor at
the origin against a walled ground square and a handful of placed objects:
car-like cuboids, pedestrian-like cylinders, and barrier-like thin boxes.
The first surface hit along each ray produces one return, perturbed by
range noise truncated at three sigma so every labeled point provably stays
inside its box inflated by that margin. Everything is a pure function of
(seed, sub-seed), so samples are bit-identical across runs.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D

log = logging.getLogger(__name__)

GROUND = 0
CAR = 1
PEDESTRIAN = 2
BARRIER = 3
WALL = 4
N_CLASSES = 5
THING_CLASSES = (CAR, PEDESTRIAN, BARRIER)
CLASS_NAMES = ("ground", "car", "pedestrian", "barrier", "wall")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_cars: int = 2
    n_pedestrians: int = 2
    n_barriers: int = 1
    n_beams: int = 24
    n_azimuth: int = 360
    noise_sigma: float = 0.01
    extent: float = 18.0          # half-size of the walled square (m)
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0
    z_ground: float = -1.8
    wall_height: float = 4.0
    max_range: float = 60.0


@dataclass
class SceneSample:
    points: np.ndarray            # [N, 4] float32: x, y, z, intensity
    semantic: np.ndarray          # [N] int64
    instance: np.ndarray          # [N] int64, 0 = stuff, k+1 = boxes[k]
    boxes: list = field(default_factory=list)
    seed: int = 0
    attempt: int = 0


def _sample_object(cls, rng):
    """Class-conditional size and yaw draws. Cylinders get yaw 0 because
    their surface carries no heading evidence."""
    if cls == CAR:
        l, w, h = (rng.uniform(3.5, 5.0), rng.uniform(1.6, 2.0),
                   rng.uniform(1.4, 1.8))
        yaw = rng.uniform(-np.pi, np.pi)
    elif cls == PEDESTRIAN:
        l = w = rng.uniform(0.5, 0.8)
        h = rng.uniform(1.5, 1.9)
        yaw = 0.0
    else:
        l, w, h = (rng.uniform(1.5, 3.0), rng.uniform(0.2, 0.4),
                   rng.uniform(0.8, 1.2))
        yaw = rng.uniform(-np.pi, np.pi)
    return l, w, h, yaw


def _place_objects(spec, rng):
    """Non-overlapping placement by circumcircle rejection; None on failure."""
    boxes = []
    plan = ((CAR, spec.n_cars), (PEDESTRIAN, spec.n_pedestrians),
            (BARRIER, spec.n_barriers))
    for cls, count in plan:
        for _ in range(count):
            for _try in range(100):
                l, w, h, yaw = _sample_object(cls, rng)
                rad = 0.5 * math.hypot(l, w)
                lim = spec.extent - rad - 0.5
                if lim <= 0.0:
                    continue
                x, y = rng.uniform(-lim, lim, 2)
                if math.hypot(x, y) < 3.0 + rad:
                    continue  # keep the sensor clear
                if any(math.hypot(x - b.x, y - b.y)
                       < rad + 0.5 * math.hypot(b.l, b.w) + 0.3
                       for b in boxes):
                    continue
                boxes.append(Box3D(x, y, spec.z_ground + 0.5 * h,
                                   l, w, h, yaw, cls=cls))
                break
            else:
                return None
    return boxes


def _ray_directions(spec):
    elev = np.linspace(np.deg2rad(spec.fov_down_deg),
                       np.deg2rad(spec.fov_up_deg), spec.n_beams)
    az = -np.pi + 2.0 * np.pi * np.arange(spec.n_azimuth) / spec.n_azimuth
    e, a = np.meshgrid(elev, az, indexing="ij")
    e, a = e.ravel(), a.ravel()
    ce = np.cos(e)
    return np.stack([ce * np.cos(a), ce * np.sin(a), np.sin(e)], axis=1)


def _ground_t(d, spec):
    with np.errstate(divide="ignore"):
        t = spec.z_ground / d[:, 2]
    ok = (d[:, 2] < 0) & (np.abs(d[:, 0] * t) <= spec.extent) \
        & (np.abs(d[:, 1] * t) <= spec.extent)
    return np.where(ok, t, np.inf)


def _wall_t(d, spec):
    best = np.full(d.shape[0], np.inf)
    for axis in (0, 1):
        for side in (spec.extent, -spec.extent):
            with np.errstate(divide="ignore"):
                t = side / d[:, axis]
            other = d[:, 1 - axis] * t
            z = d[:, 2] * t
            ok = ((t > 0) & np.isfinite(t)
                  & (np.abs(other) <= spec.extent + 1e-9)
                  & (z >= spec.z_ground)
                  & (z <= spec.z_ground + spec.wall_height))
            best = np.where(ok & (t < best), t, best)
    return best


def _obb_t(d, box):
    """Slab test against a yaw-rotated box; inf where the ray misses."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ np.array([-box.x, -box.y, -box.z])
    dl = d @ rot.T
    half = np.array([0.5 * box.l, 0.5 * box.w, 0.5 * box.h])
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (-half - o) / dl
        tb = (half - o) / dl
    t0 = np.minimum(ta, tb)
    t1 = np.maximum(ta, tb)
    zero = np.abs(dl) < 1e-12
    inside = np.abs(o) <= half
    t0 = np.where(zero, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(zero, np.where(inside, np.inf, -np.inf), t1)
    tmin = t0.max(axis=1)
    tmax = t1.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    return np.where(hit, tmin, np.inf)


def _cylinder_t(d, box):
    """Vertical cylinder inscribed in the box (l == w == diameter)."""
    r = 0.5 * box.l
    z0, z1 = box.z - 0.5 * box.h, box.z + 0.5 * box.h
    a = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    b = -2.0 * (d[:, 0] * box.x + d[:, 1] * box.y)
    cc = box.x * box.x + box.y * box.y - r * r
    disc = b * b - 4.0 * a * cc
    ok = (disc > 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    near = np.where(ok, (-b - sq) / np.where(ok, 2.0 * a, 1.0), np.inf)
    z = d[:, 2] * near
    t = np.where(ok & (near > 1e-6) & (z >= z0) & (z <= z1), near, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        cap = z1 / d[:, 2]
    dx = d[:, 0] * cap - box.x
    dy = d[:, 1] * cap - box.y
    cap_ok = (np.isfinite(cap) & (cap > 1e-6)
              & (dx * dx + dy * dy <= r * r))
    return np.where(cap_ok & (cap < t), cap, t)


def generate_scene(spec):
    """Render one scene; retries placement with the next sub-seed on
    failure (logged), so the result is still a pure function of the spec."""
    for attempt in itertools.count():
        if attempt >= 32:
            raise RuntimeError(
                f"seed {spec.seed}: object placement kept failing; "
                "the spec is too crowded for its extent")
        rng = np.random.default_rng([spec.seed, attempt])
        boxes = _place_objects(spec, rng)
        if boxes is None:
            log.warning("seed %d: placement failed, retrying with sub-seed %d",
                        spec.seed, attempt + 1)
            continue

        d = _ray_directions(spec)
        t = _ground_t(d, spec)
        sem = np.where(np.isfinite(t), GROUND, -1)
        tw = _wall_t(d, spec)
        hit = tw < t
        t = np.where(hit, tw, t)
        sem = np.where(hit, WALL, sem)
        inst = np.zeros(d.shape[0], dtype=np.int64)
        for k, box in enumerate(boxes):
            cast = _cylinder_t if box.cls == PEDESTRIAN else _obb_t
            tk = cast(d, box)
            hit = tk < t
            t = np.where(hit, tk, t)
            sem = np.where(hit, box.cls, sem)
            inst = np.where(hit, k + 1, inst)

        keep = np.isfinite(t) & (t <= spec.max_range)
        t, dirs = t[keep], d[keep]
        sem, inst = sem[keep].astype(np.int64), inst[keep]
        noise = rng.normal(0.0, spec.noise_sigma, t.shape[0])
        noise = np.clip(noise, -3.0 * spec.noise_sigma,
                        3.0 * spec.noise_sigma)
        xyz = dirs * (t + noise)[:, None]
        pts = np.concatenate(
            [xyz, np.ones((xyz.shape[0], 1))], axis=1).astype(np.float32)
        return SceneSample(points=pts, semantic=sem, instance=inst,
                           boxes=boxes, seed=spec.seed, attempt=attempt)
