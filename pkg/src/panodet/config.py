"""Run configuration: a flat, typed key=value file.

One dataclass holds every tunable of the pipeline. Files are plain text
(`key = value`, '#' comments); unknown keys are rejected so typos fail
loudly, and command-line overrides reuse the same `key=value` syntax.
"""

import dataclasses
from dataclasses import dataclass

from .geometry import GridSpec, RVSpec
from .scenegen import SceneSpec


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    # BEV voxel grid (square, centered on the sensor)
    grid_extent: float = 19.2
    grid_h: int = 64
    grid_w: int = 64
    grid_z: int = 16
    z_min: float = -2.6
    z_max: float = 3.8

    # range view
    rv_h: int = 32
    rv_w: int = 256
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0

    # channel widths
    c0: int = 8
    c1: int = 16
    c2: int = 32
    pan_w1: int = 16
    pan_w2: int = 32
    pan_w3: int = 64
    det_trunk: int = 64

    # 2D BEV backbone
    sc_width1: int = 32
    sc_width2: int = 32
    sc_n0: int = 1
    sc_n1: int = 2
    sc_n2: int = 2
    sc_ratio: int = 2

    # instance feature retrieval
    k_s1: int = 16
    k_s2: int = 25
    vfe_ratio: int = 4
    mlp_ratio: int = 4

    # training
    steps: int = 200
    lr: float = 3e-3
    weight_decay: float = 0.0
    w_det: float = 1.0
    w_pan: float = 1.0
    teacher_forcing_epochs: int = 1000000

    # decoding
    score_thresh: float = 0.1
    max_dets: int = 64
    pillar: float = 0.6
    min_points: int = 5

    # synthetic scenes
    scene_cars: int = 2
    scene_pedestrians: int = 2
    scene_barriers: int = 1
    scene_beams: int = 24
    scene_azimuth: int = 360
    noise_sigma: float = 0.01
    scene_extent: float = 18.0
    wall_height: float = 4.0
    max_range: float = 60.0

    # ablations
    no_ifr: bool = False
    no_dual_task: bool = False
    no_sc: bool = False

    def validate(self):
        if self.scene_extent >= self.grid_extent:
            raise ValueError("scene_extent must be smaller than grid_extent")
        if self.z_min >= self.z_max:
            raise ValueError("z_min must be below z_max")
        if min(self.k_s1, self.k_s2) < 1:
            raise ValueError("K values must be >= 1")
        if min(self.vfe_ratio, self.mlp_ratio, self.sc_ratio) < 1:
            raise ValueError("hidden ratios must be >= 1")
        if self.steps < 0 or self.teacher_forcing_epochs < 0:
            raise ValueError("steps and teacher_forcing_epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.grid()
        self.rv()
        return self

    def grid(self):
        e = self.grid_extent
        return GridSpec(x_min=-e, x_max=e, y_min=-e, y_max=e,
                        z_min=self.z_min, z_max=self.z_max,
                        h=self.grid_h, w=self.grid_w, z=self.grid_z)

    def rv(self):
        return RVSpec(h=self.rv_h, w=self.rv_w, fov_up_deg=self.fov_up_deg,
                      fov_down_deg=self.fov_down_deg)

    def scene_spec(self, index):
        """SceneSpec for the index-th scene of a dataset."""
        return SceneSpec(seed=self.seed + index, n_cars=self.scene_cars,
                         n_pedestrians=self.scene_pedestrians,
                         n_barriers=self.scene_barriers,
                         n_beams=self.scene_beams,
                         n_azimuth=self.scene_azimuth,
                         noise_sigma=self.noise_sigma,
                         extent=self.scene_extent,
                         fov_up_deg=self.fov_up_deg,
                         fov_down_deg=self.fov_down_deg,
                         wall_height=self.wall_height,
                         max_range=self.max_range)


_FIELDS = {f.name: f.type if isinstance(f.type, str) else f.type.__name__
           for f in dataclasses.fields(RunConfig)}
_BOOL = {"true": True, "1": True, "yes": True,
         "false": False, "0": False, "no": False}


def _parse_value(key, text):
    ftype = _FIELDS[key]
    text = text.strip()
    if ftype == "bool":
        try:
            return _BOOL[text.lower()]
        except KeyError:
            raise ValueError(f"config key {key}: expected a boolean, "
                             f"got {text!r}") from None
    try:
        return {"int": int, "float": float}[ftype](text)
    except ValueError:
        raise ValueError(f"config key {key}: expected {ftype}, "
                         f"got {text!r}") from None


def _parse_pairs(lines, where):
    out = {}
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{where}:{i}: expected key=value, got {raw!r}")
        key, text = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"{where}:{i}: unknown config key {key!r}")
        out[key] = _parse_value(key, text)
    return out


def load_config(path=None, overrides=()):
    """RunConfig from an optional file plus `key=value` override strings."""
    values = {}
    if path is not None:
        with open(path) as f:
            values.update(_parse_pairs(f.read().splitlines(), str(path)))
    values.update(_parse_pairs(list(overrides), "override"))
    return RunConfig(**values).validate()


def save_config(cfg, path):
    with open(path, "w") as f:
        for field in dataclasses.fields(RunConfig):
            f.write(f"{field.name} = {getattr(cfg, field.name)}\n")
