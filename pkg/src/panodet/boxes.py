"""3D bounding box type plus array and CSV conversions."""

import csv
from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Normalize angles to [-pi, pi); pi maps to -pi."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class Box3D:
    """Upright box: center (x, y, z) m, size (l, w, h) m, yaw rad about +z."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    cls: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.x, self.y, self.z = float(self.x), float(self.y), float(self.z)
        self.l, self.w, self.h = float(self.l), float(self.w), float(self.h)
        self.cls, self.score = int(self.cls), float(self.score)
        if min(self.l, self.w, self.h) <= 0.0:
            raise ValueError("box sizes must be positive")
        self.yaw = float(wrap_angle(self.yaw))


_COLS = ("x", "y", "z", "l", "w", "h", "yaw", "cls", "score")


def boxes_to_array(boxes):
    """[N, 9] float64 with columns x,y,z,l,w,h,yaw,cls,score."""
    out = np.zeros((len(boxes), 9), dtype=np.float64)
    for i, b in enumerate(boxes):
        out[i] = [getattr(b, c) for c in _COLS]
    return out


def boxes_from_array(arr):
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 9)
    return [Box3D(x, y, z, l, w, h, yaw, int(c), s)
            for x, y, z, l, w, h, yaw, c, s in arr]


def save_boxes_csv(path, rows):
    """rows: iterable of (scene_id, Box3D). Columns:
    scene_id,class,score,x,y,z,l,w,h,yaw."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["scene_id", "class", "score",
                     "x", "y", "z", "l", "w", "h", "yaw"])
        for scene_id, b in rows:
            wr.writerow([scene_id, b.cls, repr(b.score), repr(b.x), repr(b.y),
                         repr(b.z), repr(b.l), repr(b.w), repr(b.h),
                         repr(b.yaw)])


def load_boxes_csv(path):
    """Returns a list of (scene_id, Box3D) in file order."""
    out = []
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        for row in rd:
            out.append((row["scene_id"], Box3D(
                float(row["x"]), float(row["y"]), float(row["z"]),
                float(row["l"]), float(row["w"]), float(row["h"]),
                float(row["yaw"]), int(row["class"]), float(row["score"]))))
    return out


def points_in_box(pts, box, margin=0.0):
    """Boolean mask of points inside the yaw-rotated box, inflated by
    `margin` on every side."""
    p = np.asarray(pts, dtype=np.float64)[:, :3].copy()
    p -= np.array([box.x, box.y, box.z])
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    lx = c * p[:, 0] + s * p[:, 1]
    ly = -s * p[:, 0] + c * p[:, 1]
    return ((np.abs(lx) <= 0.5 * box.l + margin)
            & (np.abs(ly) <= 0.5 * box.w + margin)
            & (np.abs(p[:, 2]) <= 0.5 * box.h + margin))
