"""Synthetic drive generator.

Produces sequences of range-azimuth magnitude maps as seen by a forward
radar on a host vehicle approaching stationary roadside scenery: in-lane
debris (the detection target), guardrail posts and signposts (out-of-lane
clutter), and a Rayleigh noise floor. Everything is deterministic under
the drive seed.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

OBJECT_KINDS = ("debris", "guardrail", "signpost")


@dataclass(frozen=True)
class RadarGeometry:
    """Sensor grid: 464 range bins x 256 azimuth bins by default."""

    n_range: int = 464
    n_azimuth: int = 256
    range_resolution: float = 0.65  # meters per bin
    fov_degrees: float = 90.0  # total azimuth field of view
    lane_half_width: float = 1.75  # meters

    def __post_init__(self):
        if self.n_range < 1 or self.n_azimuth < 2:
            raise ConfigError("geometry needs n_range >= 1 and n_azimuth >= 2")
        if self.range_resolution <= 0:
            raise ConfigError("range_resolution must be positive")
        if not 0 < self.fov_degrees <= 180:
            raise ConfigError("fov_degrees must lie in (0, 180]")
        if self.lane_half_width <= 0:
            raise ConfigError("lane_half_width must be positive")

    @property
    def max_range(self):
        return self.n_range * self.range_resolution


@dataclass
class SceneObject:
    down_range: float  # meters ahead of the host
    cross_range: float  # meters lateral, + = left
    rcs: float  # reflectivity scalar
    extent_range: float  # physical size along range, meters
    extent_cross: float  # physical size across, meters
    kind: str = "debris"

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ConfigError(f"unknown object kind {self.kind!r}")
        if self.rcs < 0 or self.extent_range <= 0 or self.extent_cross <= 0:
            raise ConfigError("object rcs must be >= 0 and extents > 0")


@dataclass
class NoiseParams:
    """Forward-model constants: Rayleigh floor scale and the range at which
    an object's blob amplitude equals its rcs (inverse-square falloff)."""

    rayleigh_sigma: float = 1.0
    reference_range: float = 150.0


@dataclass
class Frame:
    map: np.ndarray  # float32 [n_range, n_azimuth], magnitudes >= 0
    host_speed: float  # m/s
    timestamp: float  # seconds since drive start
    ground_truth: np.ndarray  # uint8 [n_range], 1 where in-lane debris


@dataclass
class Drive:
    geometry: RadarGeometry
    frames: list[Frame]
    frame_interval: float
    rng_seed: int


def polar_of(geometry, down_range, cross_range):
    """Map Cartesian (down, cross) meters to fractional (range bin, azimuth bin).

    Azimuth is None when the bearing falls outside the field of view.
    """
    if down_range <= 0:
        raise ConfigError("polar_of requires a point in front of the host")
    slant = math.hypot(down_range, cross_range)
    range_bin = slant / geometry.range_resolution
    theta = math.atan2(cross_range, down_range)
    half_fov = math.radians(geometry.fov_degrees) / 2.0
    if abs(theta) > half_fov:
        return range_bin, None
    azimuth_bin = (theta + half_fov) / (2.0 * half_fov) * (geometry.n_azimuth - 1)
    return range_bin, azimuth_bin


def _stamp_blob(map_, range_bin, azimuth_bin, amplitude, sigma_r, sigma_a):
    n_range, n_azimuth = map_.shape
    r_lo = max(int(range_bin - 4 * sigma_r), 0)
    r_hi = min(int(range_bin + 4 * sigma_r) + 2, n_range)
    a_lo = max(int(azimuth_bin - 4 * sigma_a), 0)
    a_hi = min(int(azimuth_bin + 4 * sigma_a) + 2, n_azimuth)
    if r_lo >= r_hi or a_lo >= a_hi:
        return
    rows = np.arange(r_lo, r_hi, dtype=np.float64)
    cols = np.arange(a_lo, a_hi, dtype=np.float64)
    blob = amplitude * np.exp(
        -((rows - range_bin) ** 2 / (2 * sigma_r**2))[:, None]
        - ((cols - azimuth_bin) ** 2 / (2 * sigma_a**2))[None, :]
    )
    map_[r_lo:r_hi, a_lo:a_hi] += blob.astype(map_.dtype)


def _ground_truth(geometry, objects):
    gt = np.zeros(geometry.n_range, dtype=np.uint8)
    res = geometry.range_resolution
    for obj in objects:
        if obj.kind != "debris" or abs(obj.cross_range) > geometry.lane_half_width:
            continue
        slant = math.hypot(obj.down_range, obj.cross_range)
        center = round(slant / res)
        if center > geometry.n_range - 1:
            continue
        half = obj.extent_range / 2.0
        lo = max(math.ceil((slant - half) / res), 0)
        hi = min(math.floor((slant + half) / res), geometry.n_range - 1)
        if lo <= hi:
            gt[lo:hi + 1] = 1
        gt[center] = 1
    return gt


def render_frame(geometry, objects, host_speed, noise, rng, timestamp=0.0):
    """Render one frame. Returns (Frame, skipped_count).

    Objects behind the host, outside the field of view, or beyond maximum
    range contribute nothing and are counted as skipped.
    """
    map_ = np.zeros((geometry.n_range, geometry.n_azimuth), dtype=np.float32)
    half_fov = math.radians(geometry.fov_degrees) / 2.0
    bins_per_radian = (geometry.n_azimuth - 1) / (2.0 * half_fov)
    skipped = 0
    visible = []
    for obj in objects:
        if obj.down_range <= 0:
            skipped += 1
            continue
        range_bin, azimuth_bin = polar_of(geometry, obj.down_range, obj.cross_range)
        if azimuth_bin is None or range_bin > geometry.n_range - 1:
            skipped += 1
            continue
        visible.append(obj)
        slant = math.hypot(obj.down_range, obj.cross_range)
        amplitude = obj.rcs * (noise.reference_range / slant) ** 2
        sigma_r = max(obj.extent_range / (2.0 * geometry.range_resolution), 0.5)
        sigma_a = max((obj.extent_cross / slant) * bins_per_radian / 2.0, 0.6)
        _stamp_blob(map_, range_bin, azimuth_bin, amplitude, sigma_r, sigma_a)
    if noise.rayleigh_sigma > 0:
        map_ += rng.rayleigh(noise.rayleigh_sigma, size=map_.shape).astype(np.float32)
    frame = Frame(map=map_, host_speed=float(host_speed), timestamp=float(timestamp),
                  ground_truth=_ground_truth(geometry, visible))
    return frame, skipped


def _span(value, name):
    """Normalize a sampling span: scalar -> (v, v); [lo, hi] kept as tuple."""
    if isinstance(value, (int, float)):
        return (float(value), float(value))
    if len(value) != 2:
        raise ConfigError(f"{name} must be a scalar or a [low, high] pair")
    lo, hi = float(value[0]), float(value[1])
    if lo > hi:
        raise ConfigError(f"{name} span has low > high")
    return (lo, hi)


_SPAN_FIELDS = (
    "host_speed", "slow_speed", "debris_start_range", "debris_cross",
    "debris_rcs", "debris_extent_range", "debris_extent_cross",
    "guardrail_offset", "guardrail_rcs", "signpost_rcs",
)


@dataclass
class DriveSpec:
    """Sampling recipe for one drive; spans are [low, high] uniform ranges."""

    geometry: RadarGeometry = field(default_factory=RadarGeometry)
    n_frames: int = 100
    frame_interval: float = 0.065
    host_speed: tuple = (24.0, 34.0)
    slow_fraction: float = 0.1  # probability of a below-critical-speed drive
    slow_speed: tuple = (2.0, 4.0)
    n_debris: int = 1
    debris_start_range: tuple = (250.0, 292.0)
    debris_cross: tuple = (-1.0, 1.0)
    debris_rcs: tuple = (15.0, 40.0)
    debris_extent_range: tuple = (0.6, 1.4)
    debris_extent_cross: tuple = (0.4, 1.0)
    guardrail: bool = True
    guardrail_spacing: float = 18.0
    guardrail_offset: tuple = (5.5, 8.0)
    guardrail_rcs: tuple = (3.0, 10.0)
    n_signposts: int = 3
    signpost_rcs: tuple = (5.0, 20.0)
    noise: NoiseParams = field(default_factory=NoiseParams)

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.frame_interval <= 0:
            raise ConfigError("frame_interval must be positive")
        if not 0 <= self.slow_fraction <= 1:
            raise ConfigError("slow_fraction must lie in [0, 1]")
        if self.n_debris < 0 or self.n_signposts < 0:
            raise ConfigError("object counts must be >= 0")
        if self.guardrail_spacing <= 0:
            raise ConfigError("guardrail_spacing must be positive")
        for name in _SPAN_FIELDS:
            setattr(self, name, _span(getattr(self, name), name))

    def to_dict(self):
        d = dataclasses.asdict(self)
        for name in _SPAN_FIELDS:
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown drive spec fields: {sorted(unknown)}")
        if "geometry" in data:
            try:
                data["geometry"] = RadarGeometry(**data["geometry"])
            except TypeError as e:
                raise ConfigError(f"bad geometry: {e}") from None
        if "noise" in data:
            try:
                data["noise"] = NoiseParams(**data["noise"])
            except TypeError as e:
                raise ConfigError(f"bad noise params: {e}") from None
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"bad drive spec: {e}") from None


def default_drive_spec():
    return DriveSpec()


def _uniform(rng, span):
    lo, hi = span
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _initial_objects(spec, rng):
    geometry = spec.geometry
    travel = spec.host_speed[1] * spec.frame_interval * spec.n_frames
    horizon = geometry.max_range + travel
    objects = []
    for _ in range(spec.n_debris):
        objects.append(SceneObject(
            down_range=_uniform(rng, spec.debris_start_range),
            cross_range=_uniform(rng, spec.debris_cross),
            rcs=_uniform(rng, spec.debris_rcs),
            extent_range=_uniform(rng, spec.debris_extent_range),
            extent_cross=_uniform(rng, spec.debris_extent_cross),
            kind="debris",
        ))
    if spec.guardrail:
        for side in (1.0, -1.0):
            offset = _uniform(rng, spec.guardrail_offset)
            phase = float(rng.uniform(0.0, spec.guardrail_spacing))
            down = 2.0 + phase
            while down < horizon:
                objects.append(SceneObject(
                    down_range=down,
                    cross_range=side * offset,
                    rcs=_uniform(rng, spec.guardrail_rcs),
                    extent_range=0.4,
                    extent_cross=0.4,
                    kind="guardrail",
                ))
                down += spec.guardrail_spacing
    for _ in range(spec.n_signposts):
        side = 1.0 if rng.random() < 0.5 else -1.0
        objects.append(SceneObject(
            down_range=float(rng.uniform(20.0, horizon)),
            cross_range=side * float(rng.uniform(4.0, 10.0)),
            rcs=_uniform(rng, spec.signpost_rcs),
            extent_range=0.5,
            extent_cross=0.5,
            kind="signpost",
        ))
    return objects


def generate_drive(spec, rng_seed):
    """Deterministically generate one drive from a spec and a seed."""
    seed_seq = np.random.SeedSequence(rng_seed)
    setup_seed, *frame_seeds = seed_seq.spawn(spec.n_frames + 1)
    setup_rng = np.random.default_rng(setup_seed)

    slow = setup_rng.random() < spec.slow_fraction
    speed_span = spec.slow_speed if slow else spec.host_speed
    # f32 so the value survives the drive file format bit-exactly
    host_speed = float(np.float32(_uniform(setup_rng, speed_span)))
    initial = _initial_objects(spec, setup_rng)

    frames = []
    for i in range(spec.n_frames):
        advance = host_speed * spec.frame_interval * i
        scene = []
        for obj in initial:
            down = obj.down_range - advance
            if down > 0.5:
                scene.append(dataclasses.replace(obj, down_range=down))
        frame, _ = render_frame(
            spec.geometry, scene, host_speed, spec.noise,
            np.random.default_rng(frame_seeds[i]),
            timestamp=i * spec.frame_interval,
        )
        frames.append(frame)
    return Drive(geometry=spec.geometry, frames=frames,
                 frame_interval=spec.frame_interval, rng_seed=int(rng_seed))
