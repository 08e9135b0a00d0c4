"""Synthetic unresolved space imagery: star fields plus resident space objects.

Two telescope tracking modes are modeled. In rate-track mode the camera
follows the object, so RSOs image as point sources while stars trail into
streaks; in sidereal mode the star field is fixed and RSOs streak instead.
Every generated frame carries exact ground-truth boxes for its RSOs.

Coordinate convention: pixel (row r, col c) covers [c, c+1] x [r, r+1], so a
width x height frame spans [0, width] x [0, height] in continuous (x, y).
"""

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.special import erf

from .boxes import BoundingBox, clip_box
from .errors import ConfigError
from .imgio import to_uint16

_MASK64 = (1 << 64) - 1
_PLACEMENT_TAG = _MASK64  # frame indices are < 2**32, so this never collides


class TrackingMode(Enum):
    RATE_TRACK = "rate_track"
    SIDEREAL = "sidereal"


@dataclass(frozen=True)
class SceneConfig:
    """Full recipe for one synthetic frame; identical configs render bit-identically."""

    width_px: int = 512
    height_px: int = 512
    tracking_mode: TrackingMode = TrackingMode.RATE_TRACK
    star_count: int = 25
    star_mag_range: tuple = (7.0, 10.5)
    rso_count: int = 2
    rso_mag_range: tuple = (7.0, 9.0)
    streak_length_px: float = 30.0
    streak_angle_rad: float = 0.6
    psf_sigma_px: float = 1.5
    zero_point_mag: float = 20.0
    background_level: float = 200.0
    read_noise_sigma: float = 8.0
    shot_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ConfigError(f"frame dims must be positive: {self.width_px}x{self.height_px}")
        if self.star_count < 0 or self.rso_count < 0:
            raise ConfigError("source counts must be non-negative")
        for name, (lo, hi) in (("star_mag_range", self.star_mag_range),
                               ("rso_mag_range", self.rso_mag_range)):
            if lo > hi:
                raise ConfigError(f"{name}: mag_min {lo} > mag_max {hi}")
        if self.psf_sigma_px <= 0:
            raise ConfigError(f"psf_sigma_px must be > 0, got {self.psf_sigma_px}")
        if self.streak_length_px < 0:
            raise ConfigError(f"streak_length_px must be >= 0, got {self.streak_length_px}")
        if self.background_level < 0 or self.read_noise_sigma < 0:
            raise ConfigError("noise levels must be non-negative")
        if not (0 <= self.seed <= _MASK64):
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["tracking_mode"] = self.tracking_mode.value
        d["star_mag_range"] = list(self.star_mag_range)
        d["rso_mag_range"] = list(self.rso_mag_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene config fields: {sorted(unknown)}")
        if "tracking_mode" in d:
            d["tracking_mode"] = TrackingMode(d["tracking_mode"])
        for k in ("star_mag_range", "rso_mag_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def load_scene_config(path) -> SceneConfig:
    """Read a SceneConfig from a plain-text JSON document."""
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return SceneConfig.from_dict(d)


def save_scene_config(config: SceneConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass(eq=False)
class LabeledFrame:
    """A 16-bit frame plus ground-truth boxes for its RSOs."""

    pixels: np.ndarray  # (H, W) uint16
    boxes: list  # of BoundingBox
    tracking_mode: TrackingMode
    provenance: object = "external"  # SceneConfig when synthesized

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def same_as(self, other) -> bool:
        """Bit-identical comparison (pixels, boxes, mode, provenance)."""
        return (
            np.array_equal(self.pixels, other.pixels)
            and self.pixels.dtype == other.pixels.dtype
            and self.boxes == other.boxes
            and self.tracking_mode == other.tracking_mode
            and self.provenance == other.provenance
        )


# ---------------------------------------------------------------------------
# photometry and rendering


def mag_to_flux(mag, zero_point) -> float:
    """Instrumental magnitude -> total flux in counts: 10**(-0.4 * (mag - zp))."""
    return 10.0 ** (-0.4 * (np.asarray(mag, dtype=np.float64) - zero_point))


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixing function (64-bit)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Derive an independent child seed by splitmix-hashing seed with each tag."""
    h = splitmix64(seed & _MASK64)
    for t in tags:
        h = splitmix64(h ^ (int(t) & _MASK64))
    return h


def _axis_profiles(centers, lo_edge, n_pix, sigma):
    """Pixel-integrated 1-D Gaussian profiles.

    centers: (k,) source coordinates along the axis; returns (k, n_pix) where
    row k holds the Gaussian mass of each unit pixel [lo_edge+i, lo_edge+i+1].
    """
    edges = lo_edge + np.arange(n_pix + 1, dtype=np.float64)
    z = (edges[None, :] - np.asarray(centers, dtype=np.float64)[:, None]) / (sigma * math.sqrt(2.0))
    cdf = 0.5 * erf(z)
    return cdf[:, 1:] - cdf[:, :-1]


def _render_samples(canvas, points, flux_per_sample, sigma):
    """Accumulate pixel-integrated Gaussians at the given sub-sample points."""
    h, w = canvas.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r = 6.0 * sigma  # truncation radius; tail mass beyond 6 sigma < 2e-9
    c0 = max(int(math.floor(pts[:, 0].min() - r)), 0)
    c1 = min(int(math.ceil(pts[:, 0].max() + r)), w)
    r0 = max(int(math.floor(pts[:, 1].min() - r)), 0)
    r1 = min(int(math.ceil(pts[:, 1].max() + r)), h)
    if c0 >= c1 or r0 >= r1:
        return canvas
    px = _axis_profiles(pts[:, 0], float(c0), c1 - c0, sigma)
    py = _axis_profiles(pts[:, 1], float(r0), r1 - r0, sigma)
    canvas[r0:r1, c0:c1] += flux_per_sample * (py.T @ px)
    return canvas


def render_point_source(canvas, center, flux, sigma):
    """Add an isotropic Gaussian of total flux `flux` centered at (x, y).

    Pixel values are incremented in place (and the canvas returned); sources
    centered off-canvas contribute only their in-bounds tail.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    if flux < 0:
        raise ConfigError(f"flux must be >= 0, got {flux}")
    if flux == 0:
        return canvas
    return _render_samples(canvas, [center], float(flux), float(sigma))


def render_streak(canvas, start, end, flux, sigma):
    """Add a uniform line segment convolved with the Gaussian PSF.

    Realized as dense sub-sample summation along the segment with spacing
    <= sigma/4, each sub-sample carrying flux/n; a zero-length segment is
    exactly a point source.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    if flux < 0:
        raise ConfigError(f"flux must be >= 0, got {flux}")
    if flux == 0:
        return canvas
    x0, y0 = float(start[0]), float(start[1])
    x1, y1 = float(end[0]), float(end[1])
    length = math.hypot(x1 - x0, y1 - y0)
    if length == 0.0:
        return _render_samples(canvas, [start], float(flux), float(sigma))
    n = int(math.ceil(length / (sigma / 4.0))) + 1
    ts = np.linspace(0.0, 1.0, n)
    pts = np.stack([x0 + ts * (x1 - x0), y0 + ts * (y1 - y0)], axis=1)
    return _render_samples(canvas, pts, float(flux) / n, float(sigma))


def add_noise(image, config: SceneConfig, rng) -> np.ndarray:
    """Apply the sensor noise chain: background, optional Poisson, read noise, clamp.

    Returns a float image; quantization to 16 bits happens at frame assembly.
    """
    out = np.asarray(image, dtype=np.float64) + config.background_level
    if config.shot_noise:
        out = rng.poisson(np.clip(out, 0.0, None)).astype(np.float64)
    if config.read_noise_sigma > 0:
        out = out + rng.normal(0.0, config.read_noise_sigma, size=out.shape)
    return np.clip(out, 0.0, None)


# ---------------------------------------------------------------------------
# scene assembly


@dataclass
class _SceneObjects:
    star_xy: np.ndarray  # (S, 2)
    star_flux: np.ndarray  # (S,)
    rso_xy: np.ndarray  # (R, 2) start-of-sequence centers
    rso_flux: np.ndarray  # (R,)


def _motion_direction(config):
    return math.cos(config.streak_angle_rad), math.sin(config.streak_angle_rad)


def _check_geometry(config):
    if min(config.width_px, config.height_px) < 6.0 * config.psf_sigma_px:
        raise ConfigError(
            f"frame {config.width_px}x{config.height_px} smaller than 6 sigma "
            f"({6.0 * config.psf_sigma_px:.1f} px); ground-truth boxes cannot fit"
        )


def _sample_objects(config: SceneConfig, rng, n_frames: int) -> _SceneObjects:
    """Randomize the star field and RSO placement for one observation.

    RSO starts are drawn as unit uniforms mapped into the range that keeps the
    full rendered extent, over all n_frames of drift, inside the frame. The
    draws themselves do not depend on n_frames, so an observation's first frame
    matches a standalone single-frame generation with the same seed.
    """
    w, h = float(config.width_px), float(config.height_px)
    s = config.psf_sigma_px
    star_x = rng.uniform(0.0, w, size=config.star_count)
    star_y = rng.uniform(0.0, h, size=config.star_count)
    star_mag = rng.uniform(*config.star_mag_range, size=config.star_count)
    rso_u = rng.uniform(size=(config.rso_count, 2))
    rso_mag = rng.uniform(*config.rso_mag_range, size=config.rso_count)

    dx, dy = _motion_direction(config)
    length = config.streak_length_px
    streak_ext_x = 0.5 * length * abs(dx) if config.tracking_mode is TrackingMode.SIDEREAL else 0.0
    streak_ext_y = 0.5 * length * abs(dy) if config.tracking_mode is TrackingMode.SIDEREAL else 0.0
    drift_x = (n_frames - 1) * length * dx
    drift_y = (n_frames - 1) * length * dy

    lo_x = 3.0 * s + streak_ext_x + max(0.0, -drift_x)
    hi_x = w - 3.0 * s - streak_ext_x - max(0.0, drift_x)
    lo_y = 3.0 * s + streak_ext_y + max(0.0, -drift_y)
    hi_y = h - 3.0 * s - streak_ext_y - max(0.0, drift_y)
    if config.rso_count > 0 and (hi_x <= lo_x or hi_y <= lo_y):
        raise ConfigError(
            f"RSO trajectory does not fit a {config.width_px}x{config.height_px} frame "
            f"(streak {length} px, {n_frames} frames)"
        )
    rso_xy = np.stack(
        [lo_x + rso_u[:, 0] * (hi_x - lo_x), lo_y + rso_u[:, 1] * (hi_y - lo_y)], axis=1
    ) if config.rso_count > 0 else np.zeros((0, 2))

    zp = config.zero_point_mag
    return _SceneObjects(
        star_xy=np.stack([star_x, star_y], axis=1) if config.star_count else np.zeros((0, 2)),
        star_flux=mag_to_flux(star_mag, zp),
        rso_xy=rso_xy,
        rso_flux=mag_to_flux(rso_mag, zp),
    )


def _render_frame(config: SceneConfig, objs: _SceneObjects, frame_idx: int,
                  noise_rng, provenance) -> LabeledFrame:
    w, h = config.width_px, config.height_px
    s = config.psf_sigma_px
    length = config.streak_length_px
    dx, dy = _motion_direction(config)
    half = 0.5 * length
    canvas = np.zeros((h, w), dtype=np.float64)

    stars_streak = config.tracking_mode is TrackingMode.RATE_TRACK
    for (x, y), flux in zip(objs.star_xy, objs.star_flux):
        if stars_streak and length > 0:
            render_streak(canvas, (x - half * dx, y - half * dy),
                          (x + half * dx, y + half * dy), flux, s)
        else:
            render_point_source(canvas, (x, y), flux, s)

    boxes = []
    for (x0, y0), flux in zip(objs.rso_xy, objs.rso_flux):
        cx = x0 + frame_idx * length * dx
        cy = y0 + frame_idx * length * dy
        if stars_streak or length == 0:  # rate-track: RSO is a point source
            render_point_source(canvas, (cx, cy), flux, s)
            ext_x = ext_y = 0.0
        else:
            render_streak(canvas, (cx - half * dx, cy - half * dy),
                          (cx + half * dx, cy + half * dy), flux, s)
            ext_x, ext_y = half * abs(dx), half * abs(dy)
        clipped = clip_box(cx - ext_x - 3 * s, cy - ext_y - 3 * s,
                           cx + ext_x + 3 * s, cy + ext_y + 3 * s, w, h)
        if clipped is None:
            raise ConfigError(f"RSO box at ({cx:.1f}, {cy:.1f}) fell outside the frame")
        boxes.append(BoundingBox(*clipped))

    noisy = add_noise(canvas, config, noise_rng)
    return LabeledFrame(pixels=to_uint16(noisy), boxes=boxes,
                        tracking_mode=config.tracking_mode, provenance=provenance)


def generate_scene(config: SceneConfig) -> LabeledFrame:
    """Render one fully labeled synthetic frame from a seeded config.

    Star and RSO positions and magnitudes are sampled uniformly from the
    configured ranges; which population streaks follows the tracking mode.
    Each RSO's box is the tight bound of its noiseless extent (3 sigma around
    the point or segment). Identical configs produce bit-identical frames.
    """
    _check_geometry(config)
    place_rng = np.random.default_rng(derive_seed(config.seed, _PLACEMENT_TAG))
    objs = _sample_objects(config, place_rng, n_frames=1)
    noise_rng = np.random.default_rng(derive_seed(config.seed, 0))
    return _render_frame(config, objs, 0, noise_rng, provenance=config)


def generate_observation_set(base: SceneConfig, n_obs: int, frames_per_obs: int,
                             master_seed: int) -> list:
    """Generate n_obs observations of frames_per_obs frames each.

    Each observation randomizes the star field and RSO placement once, then
    advances every RSO by streak_length_px along the motion direction per
    frame. Observation o uses the derived seed derive_seed(master_seed, o);
    its first frame is bit-identical to generate_scene with that seed.
    """
    if n_obs < 1 or frames_per_obs < 1:
        raise ConfigError(f"need n_obs >= 1 and frames_per_obs >= 1, got {n_obs}, {frames_per_obs}")
    _check_geometry(base)
    frames = []
    for o in range(n_obs):
        obs_seed = derive_seed(master_seed, o)
        obs_config = replace(base, seed=obs_seed)
        place_rng = np.random.default_rng(derive_seed(obs_seed, _PLACEMENT_TAG))
        objs = _sample_objects(base, place_rng, n_frames=frames_per_obs)
        for f in range(frames_per_obs):
            noise_rng = np.random.default_rng(derive_seed(obs_seed, f))
            frames.append(_render_frame(base, objs, f, noise_rng, provenance=obs_config))
    return frames
