"""Procedural generation of heterogeneous environment datasets, plus dataset
persistence and partitioning.

Each environment renders 64x64 RGB frames: a palette gradient background with
value-noise texture, one to four obstacle shapes shaded relative to the local
background, and (for real-analog environments) sensor noise, a radial
vignette, and brightness jitter. The blocked/free label is a geometric
predicate: an image is blocked iff at least one obstacle covers >=
BAND_AREA_MIN pixels of the lower-center band ahead of the robot.
``band_occlusion_label`` is the pixel-space counterpart used to sanity-check
that generated labels are visually grounded.

Environments are deliberately non-IID in ways that reward cross-environment
training: backgrounds span a wide brightness range while obstacle shades stay
proportional to it (so no single absolute darkness threshold fits every
environment), and each training environment carries its own incidental
regularity (clutter correlated or anti-correlated with the label, or an
extra-dark near-field obstacle) that does not hold elsewhere. A model fitted
to one environment can lean on these local cues; only the band-occlusion
geometry is common to all environments and to the mixed hold-out.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .seeds import seed_stream

IMAGE_H = 64
IMAGE_W = 64
IMAGE_C = 3

BLOCKED = "blocked"
FREE = "free"

SIM = "sim"
REAL = "real"

# Lower-center band the robot is about to drive through, and the obstacle
# coverage (in pixels) that makes an image "blocked".
BAND_X0, BAND_X1 = 16, 48
BAND_Y0, BAND_Y1 = 40, 64
BAND_AREA_MIN = 120

# Quantile of the lower-half brightness used as the background reference by
# the pixel-space occlusion detector (floor markings and obstacles cover less
# than 30% of the lower half, so this lands on clear floor).
_FLOOR_REFERENCE_QUANTILE = 0.70

# Generation keeps blocked images comfortably above BAND_AREA_MIN and free
# images comfortably below, so the pixel detector is not reading boundary
# cases. Free images still get a floor marking across the band (same shapes
# and sizes as a near-field obstacle, marking shade), so band coverage alone
# never separates the classes.
_BLOCKED_MIN_COVER = 170
_FREE_MAX_COVER = 40

_ENV_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")

MANIFEST_HEADER = "# fedroam-dataset"


class DatasetIOError(Exception):
    """Base for dataset persistence failures."""


class MissingManifestError(DatasetIOError):
    pass


class MissingBlobError(DatasetIOError):
    pass


class ChecksumError(DatasetIOError):
    pass


class TruncatedBlobError(DatasetIOError):
    pass


class ManifestFormatError(DatasetIOError):
    pass


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class EnvSpec:
    """Rendering recipe for one environment.

    Obstacle shades are fractions of the palette's mean brightness, so the
    obstacle/background contrast is comparable across environments while
    absolute pixel values are not. ``clutter_bias`` ties the distractor count
    to the label (+1: blocked scenes are cluttered, -1: free scenes are,
    0: balanced), giving each training environment its own incidental cue.
    """

    env_id: str
    domain: str                      # "sim" or "real"
    palette: tuple[tuple[float, float, float], ...]  # 3 RGB base colors, top to bottom
    texture_amplitude: float         # value-noise amplitude in [0, 1]
    obstacle_family: str             # "boxes", "ellipses" or "mixed"
    blocked_fraction: float          # strictly inside (0, 1)
    sensor_sigma: float              # per-pixel Gaussian noise, >= 0
    vignette: float                  # radial vignette strength in [0, 1]
    clutter_bias: int = 0            # -1, 0 or +1
    near_shade: tuple[float, float] = (0.47, 0.57)   # near-field obstacle shade range
    far_shade: tuple[float, float] = (0.47, 0.57)    # distractor shade range
    pattern_shade: tuple[float, float] = (0.68, 0.76)  # floor-marking shade range

    def __post_init__(self):
        if not _ENV_ID_RE.match(self.env_id):
            raise ValueError(f"env_id must match [A-Za-z0-9_-]+, got {self.env_id!r}")
        if self.domain not in (SIM, REAL):
            raise ValueError(f"domain must be 'sim' or 'real', got {self.domain!r}")
        if len(self.palette) != 3 or any(len(c) != 3 for c in self.palette):
            raise ValueError("palette must hold exactly 3 RGB colors")
        if any(not (0.0 <= v <= 1.0) for c in self.palette for v in c):
            raise ValueError("palette components must lie in [0, 1]")
        if not 0.0 <= self.texture_amplitude <= 1.0:
            raise ValueError(f"texture_amplitude out of [0, 1]: {self.texture_amplitude}")
        if self.obstacle_family not in ("boxes", "ellipses", "mixed"):
            raise ValueError(f"unknown obstacle family {self.obstacle_family!r}")
        if not 0.0 < self.blocked_fraction < 1.0:
            raise ValueError(f"blocked_fraction must be strictly inside (0, 1): {self.blocked_fraction}")
        if self.sensor_sigma < 0:
            raise ValueError(f"sensor_sigma must be >= 0: {self.sensor_sigma}")
        if self.domain == REAL and self.sensor_sigma <= 0:
            raise ValueError("real-analog environments need sensor_sigma > 0")
        if not 0.0 <= self.vignette <= 1.0:
            raise ValueError(f"vignette out of [0, 1]: {self.vignette}")
        if self.clutter_bias not in (-1, 0, 1):
            raise ValueError(f"clutter_bias must be -1, 0 or 1: {self.clutter_bias}")
        if self.near_shade[1] >= self.pattern_shade[0] or self.far_shade[1] >= self.pattern_shade[0]:
            raise ValueError("obstacle shades must stay below pattern shades "
                             f"({self.near_shade}/{self.far_shade} vs {self.pattern_shade})")
        for rng_name, shade in (("near_shade", self.near_shade),
                                ("far_shade", self.far_shade),
                                ("pattern_shade", self.pattern_shade)):
            if not (0.0 < shade[0] <= shade[1] < 1.0):
                raise ValueError(f"{rng_name} must satisfy 0 < lo <= hi < 1: {shade}")

    @property
    def brightness(self) -> float:
        """Mean palette brightness."""
        return float(np.mean(self.palette))

    @property
    def floor_brightness(self) -> float:
        """Brightness of the bottom palette color; obstacle shades and the
        occlusion detector scale against it."""
        return float(np.mean(self.palette[2]))

    @property
    def shade_boundary(self) -> float:
        """Shade ratio separating obstacles from floor patterns in this
        environment (midway between the two ranges)."""
        return (max(self.near_shade[1], self.far_shade[1]) + self.pattern_shade[0]) / 2.0


@dataclass(frozen=True)
class LabeledImage:
    """One navigation frame with its blocked/free label and provenance."""

    pixels: np.ndarray               # (64, 64, 3) float32 in [0, 1]
    label: str                       # "blocked" or "free"
    env_id: str
    domain: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != (IMAGE_H, IMAGE_W, IMAGE_C):
            raise ValueError(f"pixels must be {(IMAGE_H, IMAGE_W, IMAGE_C)}, got {px.shape}")
        if self.label not in (BLOCKED, FREE):
            raise ValueError(f"label must be blocked/free, got {self.label!r}")
        if self.domain not in (SIM, REAL):
            raise ValueError(f"domain must be sim/real, got {self.domain!r}")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)


HOLDOUT_NAME = "R*"


@dataclass(frozen=True)
class Dataset:
    """Named collection of labeled frames, tagged train or validation."""

    name: str
    items: tuple[LabeledImage, ...]
    split: str                       # "train" or "validation"

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise ValueError(f"dataset {self.name!r} is empty")
        if self.split not in ("train", "validation"):
            raise ValueError(f"split must be train/validation, got {self.split!r}")
        if self.name != HOLDOUT_NAME:
            domains = {im.domain for im in items}
            if len(domains) > 1:
                raise ValueError(f"dataset {self.name!r} mixes domains {sorted(domains)}")
        object.__setattr__(self, "items", items)

    @property
    def domain(self) -> str:
        return self.items[0].domain

    def __len__(self) -> int:
        return len(self.items)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (pixels, integer labels) with blocked = 1."""
        x = np.stack([im.pixels for im in self.items])
        y = np.fromiter((1 if im.label == BLOCKED else 0 for im in self.items),
                        dtype=np.int64, count=len(self.items))
        return x, y


@dataclass(frozen=True)
class Partition:
    """One environment's train/validation pair, as consumed by the grids."""

    name: str
    train: Dataset
    val: Dataset


@dataclass(frozen=True)
class PartitionSpec:
    """Relative dataset sizes and per-environment blocked fractions."""

    shares: tuple[float, ...]
    blocked_fractions: tuple[float, ...]

    def __post_init__(self):
        if len(self.shares) != len(self.blocked_fractions):
            raise ValueError("shares and blocked_fractions must align")
        if any(s <= 0 for s in self.shares):
            raise ValueError("every share must be positive")
        if abs(sum(self.shares) - 1.0) > 1e-9:
            raise ValueError(f"shares must sum to 1 within 1e-9, got {sum(self.shares)}")


# ---------------------------------------------------------------------------
# Environment roster
#
# Sim suite: hospital / office / warehouse analogs. Every frame mixes true
# obstacles with floor markings of the same shape families and sizes, so
# geometry alone carries no label signal; what separates them is shade, and
# the obstacle/marking shade windows sit at a different level per
# environment. Within one environment a plain shade threshold works; across
# environments the windows interleave (hospital obstacles are lighter than
# warehouse markings), so a model must relate the band content to the other
# markings in the same frame to fit more than one environment. The hold-out
# rooms place their windows in the gaps between the training thresholds.
# Additional per-environment cues: clutter correlated with the label in the
# hospital, anti-correlated in the office. Office blocked share normalized
# from its published 64:46 ratio.

SIM_SPEC = PartitionSpec(shares=(0.27, 0.54, 0.19),
                         blocked_fractions=(0.44, 64 / 110, 0.60))
REAL_SPEC = PartitionSpec(shares=(0.11, 0.44, 0.45),
                          blocked_fractions=(0.40, 0.50, 0.50))

SIM_NAMES = ("S0", "S1", "S2")
REAL_NAMES = ("R0", "R1", "R2")


def sim_env_specs() -> tuple[EnvSpec, ...]:
    return (
        EnvSpec("hospital", SIM,
                ((0.86, 0.89, 0.88), (0.78, 0.83, 0.82), (0.72, 0.78, 0.76)),
                texture_amplitude=0.03, obstacle_family="boxes",
                blocked_fraction=SIM_SPEC.blocked_fractions[0],
                sensor_sigma=0.0, vignette=0.0, clutter_bias=1,
                near_shade=(0.52, 0.58), far_shade=(0.52, 0.58),
                pattern_shade=(0.84, 0.90)),
        EnvSpec("office", SIM,
                ((0.66, 0.61, 0.52), (0.60, 0.56, 0.48), (0.54, 0.51, 0.45)),
                texture_amplitude=0.03, obstacle_family="mixed",
                blocked_fraction=SIM_SPEC.blocked_fractions[1],
                sensor_sigma=0.0, vignette=0.0, clutter_bias=-1,
                near_shade=(0.30, 0.36), far_shade=(0.30, 0.36),
                pattern_shade=(0.44, 0.50)),
        EnvSpec("warehouse", SIM,
                ((0.45, 0.45, 0.48), (0.42, 0.42, 0.45), (0.38, 0.39, 0.41)),
                texture_amplitude=0.03, obstacle_family="ellipses",
                blocked_fraction=SIM_SPEC.blocked_fractions[2],
                sensor_sigma=0.0, vignette=0.0,
                near_shade=(0.12, 0.20), far_shade=(0.12, 0.20),
                pattern_shade=(0.34, 0.40)),
    )


def real_env_specs() -> tuple[EnvSpec, ...]:
    return (
        EnvSpec("office_space", REAL,
                ((0.78, 0.74, 0.68), (0.72, 0.68, 0.63), (0.66, 0.63, 0.58)),
                texture_amplitude=0.03, obstacle_family="mixed",
                blocked_fraction=REAL_SPEC.blocked_fractions[0],
                sensor_sigma=0.03, vignette=0.2),
        EnvSpec("hallway", REAL,
                ((0.62, 0.66, 0.72), (0.58, 0.62, 0.68), (0.54, 0.58, 0.63)),
                texture_amplitude=0.03, obstacle_family="mixed",
                blocked_fraction=REAL_SPEC.blocked_fractions[1],
                sensor_sigma=0.03, vignette=0.2),
        EnvSpec("laboratory", REAL,
                ((0.57, 0.61, 0.58), (0.53, 0.57, 0.54), (0.49, 0.53, 0.51)),
                texture_amplitude=0.03, obstacle_family="mixed",
                blocked_fraction=REAL_SPEC.blocked_fractions[2],
                sensor_sigma=0.03, vignette=0.2),
    )


def holdout_env_specs() -> tuple[EnvSpec, ...]:
    """The three real rooms plus one palette never seen in training."""
    lounge = EnvSpec("lounge", REAL,
                     ((0.56, 0.50, 0.48), (0.52, 0.47, 0.45), (0.49, 0.44, 0.43)),
                     texture_amplitude=0.03, obstacle_family="mixed",
                     blocked_fraction=0.5, sensor_sigma=0.03, vignette=0.2)
    return real_env_specs() + (lounge,)


# ---------------------------------------------------------------------------
# Rendering


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int = 8) -> np.ndarray:
    """Bilinear value noise in [-1, 1]."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1.0, 1.0, (gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (grid[y0][:, x0] * (1 - fy) * (1 - fx)
            + grid[y0 + 1][:, x0] * fy * (1 - fx)
            + grid[y0][:, x0 + 1] * (1 - fy) * fx
            + grid[y0 + 1][:, x0 + 1] * fy * fx)


_YY, _XX = np.mgrid[0:IMAGE_H, 0:IMAGE_W]
_BAND_MASK = ((_YY >= BAND_Y0) & (_YY < BAND_Y1) & (_XX >= BAND_X0) & (_XX < BAND_X1))
_CENTER = (IMAGE_H - 1) / 2.0
_RADIUS2 = ((_YY - _CENTER) ** 2 + (_XX - _CENTER) ** 2) / (2 * _CENTER ** 2)


def _background(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    c0, c1, c2 = (np.asarray(c, dtype=np.float64) for c in spec.palette)
    t = np.linspace(0.0, 1.0, IMAGE_H)[:, None]
    top = c0[None, :] * (1 - 2 * t) + c1[None, :] * (2 * t)
    bottom = c1[None, :] * (2 - 2 * t) + c2[None, :] * (2 * t - 1)
    rows = np.where(t < 0.5, top, bottom)              # (H, 3)
    img = np.repeat(rows[:, None, :], IMAGE_W, axis=1)  # (H, W, 3)
    img += spec.texture_amplitude * _value_noise(rng, IMAGE_H, IMAGE_W)[:, :, None]
    return img


_FLOOR_Y0 = IMAGE_H // 2


def _floor_markings(spec: EnvSpec, img: np.ndarray, rng: np.random.Generator,
                    cover_band: bool) -> None:
    """Darken the floor with markings (mats, tape, shadows) that share the
    obstacles' shape families and sizes but sit in the lighter pattern-shade
    window. With ``cover_band`` the first marking is forced across the
    approach band exactly like a near-field obstacle would be, so band
    coverage never separates the classes; obstacle-grade shade does.
    Overlapping markings overwrite rather than compound, keeping every
    marking pixel inside the pattern-shade window."""
    base = img.copy()
    floor = _YY >= _FLOOR_Y0
    if cover_band:
        # The band mat sits in the lower quartile of the marking range:
        # slightly darker than the other markings in the frame, but still
        # clearly above obstacle grade.
        lo, hi = spec.pattern_shade
        for _ in range(100):
            kind = _sample_kind(spec, rng)
            sx = rng.uniform(16, 30)
            sy = rng.uniform(14, 26)
            cx = rng.uniform(BAND_X0 + 8, BAND_X1 - 8)
            cy = rng.uniform(BAND_Y0 + 6, BAND_Y1 - 4)
            mask = _shape_mask(kind, cx, cy, sx, sy)
            if (mask & _BAND_MASK).sum() >= _BLOCKED_MIN_COVER:
                mask &= floor
                img[mask] = base[mask] * rng.uniform(lo, lo + 0.25 * (hi - lo))
                break
    for _ in range(int(rng.integers(1, 4))):
        kind = _sample_kind(spec, rng)
        sx = rng.uniform(10, 26)
        sy = rng.uniform(8, 22)
        cx = rng.uniform(2, IMAGE_W - 2)
        cy = rng.uniform(_FLOOR_Y0 + 2, IMAGE_H - 2)
        shade = rng.uniform(*spec.pattern_shade)
        mask = _shape_mask(kind, cx, cy, sx, sy) & floor
        img[mask] = base[mask] * shade


def _shape_mask(kind: str, cx: float, cy: float, sx: float, sy: float) -> np.ndarray:
    if kind == "box":
        return ((np.abs(_XX - cx) <= sx / 2) & (np.abs(_YY - cy) <= sy / 2))
    return (((_XX - cx) / (sx / 2)) ** 2 + ((_YY - cy) / (sy / 2)) ** 2) <= 1.0


def _sample_kind(spec: EnvSpec, rng: np.random.Generator) -> str:
    if spec.obstacle_family == "boxes":
        return "box"
    if spec.obstacle_family == "ellipses":
        return "ellipse"
    return "box" if rng.random() < 0.5 else "ellipse"


def _obstacle_color(spec: EnvSpec, shade_range: tuple[float, float],
                    rng: np.random.Generator) -> np.ndarray:
    shade = spec.floor_brightness * rng.uniform(*shade_range)
    return np.clip(shade + rng.uniform(-0.02, 0.02, 3), 0.01, 1.0)


def _distractor_counts(spec: EnvSpec, blocked: bool) -> tuple[int, int]:
    """(low, high) inclusive range of distractor shapes for one image."""
    if spec.clutter_bias == 1:
        return (2, 3) if blocked else (1, 2)
    if spec.clutter_bias == -1:
        return (0, 1) if blocked else (3, 4)
    return (1, 2)


def _render_image(spec: EnvSpec, blocked: bool, rng_geom: np.random.Generator,
                  rng_fx: np.random.Generator) -> np.ndarray:
    img = _background(spec, rng_geom)
    _floor_markings(spec, img, rng_geom, cover_band=not blocked)
    scene_scale = rng_geom.uniform(0.95, 1.05)  # per-frame lighting variation

    shapes: list[tuple[np.ndarray, np.ndarray]] = []   # (mask, color)
    band_cover = np.zeros((IMAGE_H, IMAGE_W), dtype=bool)

    if blocked:
        # Near-field obstacle guaranteed to occlude the approach band.
        for _ in range(100):
            kind = _sample_kind(spec, rng_geom)
            sx = rng_geom.uniform(16, 30)
            sy = rng_geom.uniform(14, 26)
            cx = rng_geom.uniform(BAND_X0 + 8, BAND_X1 - 8)
            cy = rng_geom.uniform(BAND_Y0 + 6, BAND_Y1 - 4)
            mask = _shape_mask(kind, cx, cy, sx, sy)
            if (mask & _BAND_MASK).sum() >= _BLOCKED_MIN_COVER:
                shapes.append((mask, _obstacle_color(spec, spec.near_shade, rng_geom)))
                band_cover |= mask & _BAND_MASK
                break
        else:  # pragma: no cover - ranges above make this unreachable
            raise RuntimeError("could not place a near-field obstacle")

    lo, hi = _distractor_counts(spec, blocked)
    n_extra = int(rng_geom.integers(lo, hi + 1))
    for _ in range(n_extra):
        placed = False
        for _ in range(40):
            kind = _sample_kind(spec, rng_geom)
            sx = rng_geom.uniform(6, 22)
            sy = rng_geom.uniform(6, 20)
            cx = rng_geom.uniform(3, IMAGE_W - 3)
            cy = rng_geom.uniform(3, IMAGE_H - 3)
            mask = _shape_mask(kind, cx, cy, sx, sy)
            if blocked or (band_cover | (mask & _BAND_MASK)).sum() <= _FREE_MAX_COVER:
                placed = True
                break
        if not placed:
            # Fall back to the upper strip, which cannot touch the band.
            kind = _sample_kind(spec, rng_geom)
            sx = rng_geom.uniform(6, 18)
            sy = rng_geom.uniform(6, 14)
            cx = rng_geom.uniform(3, IMAGE_W - 3)
            cy = rng_geom.uniform(4, 28)
            mask = _shape_mask(kind, cx, cy, sx, sy)
        shapes.append((mask, _obstacle_color(spec, spec.far_shade, rng_geom)))
        band_cover |= mask & _BAND_MASK

    # Geometric label predicate must agree with the requested label.
    covers = [int((m & _BAND_MASK).sum()) for m, _ in shapes] or [0]
    assert (max(covers) >= BAND_AREA_MIN) == blocked, (covers, blocked)

    for mask, color in shapes:
        img[mask] = color
    img *= scene_scale

    if spec.domain == REAL:
        img *= 1.0 - spec.vignette * _RADIUS2[:, :, None]
        img *= rng_fx.uniform(0.92, 1.08)
        if spec.sensor_sigma > 0:
            img += rng_fx.normal(0.0, spec.sensor_sigma, img.shape)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _gradient_profile(spec: EnvSpec) -> np.ndarray:
    """Expected background brightness per row (the palette gradient)."""
    b0, b1, b2 = (float(np.mean(c)) for c in spec.palette)
    t = np.linspace(0.0, 1.0, IMAGE_H)
    return np.where(t < 0.5, b0 * (1 - 2 * t) + b1 * 2 * t,
                    b1 * (2 - 2 * t) + b2 * (2 * t - 1))


def band_occlusion_label(pixels: np.ndarray, spec: EnvSpec) -> str:
    """Pixel-space occlusion test: blocked iff the approach band holds at
    least BAND_AREA_MIN pixels darker than the environment's obstacle/pattern
    shade boundary. The reference brightness comes from the marking-free
    upper half, carried down to each band row along the palette's known
    gradient. Used to verify that generated labels are visually grounded."""
    bright = np.asarray(pixels).mean(axis=-1)
    profile = _gradient_profile(spec)
    upper = float(np.median(bright[:_FLOOR_Y0]))
    upper_expected = float(np.median(profile[:_FLOOR_Y0]))
    refs = upper * profile[BAND_Y0:BAND_Y1] / upper_expected
    band = bright[BAND_Y0:BAND_Y1, BAND_X0:BAND_X1]
    dark = int((band < spec.shade_boundary * refs[:, None]).sum())
    return BLOCKED if dark >= BAND_AREA_MIN else FREE


# ---------------------------------------------------------------------------
# Generation


def _generate_items(spec: EnvSpec, n_blocked: int, n_free: int, seed: int,
                    salt: str) -> list[LabeledImage]:
    labels = np.array([1] * n_blocked + [0] * n_free)
    order = seed_stream(seed, salt, spec.env_id, "order").permutation(labels.size)
    items = []
    for j, blocked in enumerate(labels[order]):
        rng_geom = seed_stream(seed, salt, spec.env_id, "geom", j)
        rng_fx = seed_stream(seed, salt, spec.env_id, "fx", j)
        px = _render_image(spec, bool(blocked), rng_geom, rng_fx)
        items.append(LabeledImage(px, BLOCKED if blocked else FREE, spec.env_id, spec.domain))
    return items


def generate_dataset(spec: EnvSpec, n: int, seed: int, name: str | None = None) -> Dataset:
    """Render n frames for one environment with an exact blocked count of
    round(n * blocked_fraction). Pure function of (spec, n, seed)."""
    if n < 2:
        raise ValueError(f"need at least 2 images, got {n}")
    n_blocked = int(round(n * spec.blocked_fraction))
    items = _generate_items(spec, n_blocked, n - n_blocked, seed, "dataset")
    return Dataset(name or spec.env_id, tuple(items), "train")


def largest_remainder(total: int, shares: tuple[float, ...]) -> list[int]:
    """Integer sizes proportional to shares, summing exactly to total."""
    quotas = [total * s for s in shares]
    sizes = [int(q) for q in quotas]
    remainders = sorted(range(len(shares)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in remainders[: total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def build_partitions(total: int, table: str, seed: int) -> list[Dataset]:
    """The three-environment suite for one distribution table (sim or real),
    sized by largest-remainder rounding of the table shares."""
    if total < 100:
        raise ValueError(f"total must be >= 100, got {total}")
    if table == SIM:
        pspec, specs, names = SIM_SPEC, sim_env_specs(), SIM_NAMES
    elif table == REAL:
        pspec, specs, names = REAL_SPEC, real_env_specs(), REAL_NAMES
    else:
        raise ValueError(f"unknown table {table!r}, expected 'sim' or 'real'")
    sizes = largest_remainder(total, pspec.shares)
    return [generate_dataset(spec, size, seed, name)
            for spec, size, name in zip(specs, sizes, names)]


def train_val_split(d: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split: per-class membership shuffled by seed, proportions
    preserved within one count per class."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be inside (0, 1): {val_fraction}")
    rng = seed_stream(seed, "split", d.name)
    val_idx: list[int] = []
    for label in (BLOCKED, FREE):
        class_idx = [i for i, im in enumerate(d.items) if im.label == label]
        take = int(round(len(class_idx) * val_fraction))
        picked = rng.permutation(len(class_idx))[:take]
        val_idx.extend(class_idx[i] for i in picked)
    val_set = set(val_idx)
    train_items = tuple(im for i, im in enumerate(d.items) if i not in val_set)
    val_items = tuple(im for i, im in enumerate(d.items) if i in val_set)
    if not train_items or not val_items:
        raise ValueError(f"val_fraction {val_fraction} empties one split of {d.name!r} (n={len(d)})")
    return (Dataset(d.name, train_items, "train"),
            Dataset(d.name, val_items, "validation"))


def generate_sim2real_holdout(n: int, seed: int) -> Dataset:
    """Mixed-room real-domain hold-out: all real environments plus one unseen
    palette, 50% blocked overall."""
    if n < 10:
        raise ValueError(f"hold-out needs n >= 10, got {n}")
    specs = holdout_env_specs()
    sizes = largest_remainder(n, (0.25, 0.25, 0.25, 0.25))
    target_blocked = int(round(0.5 * n))
    blocked_sizes = largest_remainder(target_blocked, tuple(sz / n for sz in sizes))
    items: list[LabeledImage] = []
    for spec, sz, bl in zip(specs, sizes, blocked_sizes):
        items.extend(_generate_items(spec, bl, sz - bl, seed, "holdout"))
    order = seed_stream(seed, "holdout", "order").permutation(len(items))
    return Dataset(HOLDOUT_NAME, tuple(items[i] for i in order), "validation")


def build_split_partitions(total: int, table: str, val_fraction: float,
                           seed: int) -> list[Partition]:
    """Generate one table's environments and split each into train/val."""
    parts = []
    for d in build_partitions(total, table, seed):
        train, val = train_val_split(d, val_fraction, seed)
        parts.append(Partition(d.name, train, val))
    return parts


# ---------------------------------------------------------------------------
# Persistence
#
# <base>.blob holds raw little-endian float32 pixels, one image after
# another. <base>.manifest is UTF-8: a header line, one line per image
# ("index,offset,label,env_id,domain"), and a trailing checksum line with the
# CRC32 of the blob.

_IMAGE_BYTES = IMAGE_H * IMAGE_W * IMAGE_C * 4


def _paths(basepath: str | Path) -> tuple[Path, Path]:
    base = Path(basepath)
    if base.suffix in (".blob", ".manifest"):
        base = base.with_suffix("")
    return base.with_suffix(base.suffix + ".blob"), base.with_suffix(base.suffix + ".manifest")


def save_dataset(d: Dataset, basepath: str | Path) -> None:
    blob_path, manifest_path = _paths(basepath)
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    blob = b"".join(im.pixels.astype("<f4", copy=False).tobytes() for im in d.items)
    lines = [f"{MANIFEST_HEADER} name={d.name} split={d.split} "
             f"height={IMAGE_H} width={IMAGE_W} channels={IMAGE_C}"]
    for i, im in enumerate(d.items):
        lines.append(f"{i},{i * _IMAGE_BYTES},{im.label},{im.env_id},{im.domain}")
    lines.append(f"checksum,{zlib.crc32(blob) & 0xFFFFFFFF:08x}")
    tmp_blob = blob_path.with_suffix(blob_path.suffix + ".tmp")
    tmp_blob.write_bytes(blob)
    tmp_blob.replace(blob_path)
    tmp_manifest = manifest_path.with_suffix(manifest_path.suffix + ".tmp")
    tmp_manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp_manifest.replace(manifest_path)


def load_dataset(basepath: str | Path) -> Dataset:
    blob_path, manifest_path = _paths(basepath)
    if not manifest_path.exists():
        raise MissingManifestError(f"no manifest at {manifest_path}")
    text = manifest_path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(MANIFEST_HEADER):
        raise ManifestFormatError(f"{manifest_path} does not start with {MANIFEST_HEADER!r}")
    header = dict(kv.split("=", 1) for kv in lines[0][len(MANIFEST_HEADER):].split())
    if not lines[-1].startswith("checksum,"):
        raise ManifestFormatError(f"{manifest_path} has no trailing checksum line")
    try:
        declared_crc = int(lines[-1].split(",", 1)[1], 16)
    except ValueError as e:
        raise ManifestFormatError(f"bad checksum line {lines[-1]!r}") from e

    if not blob_path.exists():
        raise MissingBlobError(f"manifest {manifest_path} references absent blob {blob_path}")
    blob = blob_path.read_bytes()
    if zlib.crc32(blob) & 0xFFFFFFFF != declared_crc:
        raise ChecksumError(f"blob {blob_path} fails its CRC32 check")

    items = []
    for ln in lines[1:-1]:
        fields = ln.split(",")
        if len(fields) != 5:
            raise ManifestFormatError(f"bad manifest record {ln!r}")
        _, offset_s, label, env_id, domain = fields
        try:
            offset = int(offset_s)
        except ValueError as e:
            raise ManifestFormatError(f"bad offset in record {ln!r}") from e
        if offset + _IMAGE_BYTES > len(blob):
            raise TruncatedBlobError(
                f"record at offset {offset} needs {_IMAGE_BYTES} bytes, blob has {len(blob) - offset}")
        px = np.frombuffer(blob, dtype="<f4", count=IMAGE_H * IMAGE_W * IMAGE_C,
                           offset=offset).reshape(IMAGE_H, IMAGE_W, IMAGE_C)
        items.append(LabeledImage(px.astype(np.float32), label, env_id, domain))
    return Dataset(header.get("name", blob_path.stem), tuple(items),
                   header.get("split", "train"))
