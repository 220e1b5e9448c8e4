"""Synthetic 2D tissue phantoms, birdcage coil presets and placement sweeps.

A phantom is an outer fat ellipse enclosing muscle, with a few circular
inclusions (bone or CSF-like) inside the muscle. The geometry is drawn from a
seeded generator and rasterized onto a square cell grid that spans the coil's
RF shield.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

BACKGROUND = 0
MUSCLE = 1
FAT = 2
BONE = 3
CSF = 4

CLASS_NAMES = ("air", "muscle", "fat", "bone", "csf")

TISSUE_TABLE_VERSION = 1

# (conductivity S/m, density kg/m^3, relative permittivity) keyed by MHz.
# Only muscle is frequency dependent in this table.
_TISSUE_VALUES = {
    128.0: {
        "muscle": (0.72, 1090.0, 63.0),
        "fat": (0.07, 911.0, 12.0),
        "bone": (0.06, 1908.0, 14.0),
        "csf": (2.14, 1007.0, 72.0),
    },
    297.0: {
        "muscle": (0.77, 1090.0, 58.0),
        "fat": (0.07, 911.0, 12.0),
        "bone": (0.06, 1908.0, 14.0),
        "csf": (2.14, 1007.0, 72.0),
    },
}


class InvalidSpecError(ValueError):
    pass


class NoValidPlacementError(ValueError):
    pass


@dataclass(frozen=True)
class TissueProperties:
    class_id: int
    conductivity: float
    density: float
    rel_permittivity: float

    def __post_init__(self):
        if self.class_id == BACKGROUND:
            if self.conductivity != 0 or self.density != 0:
                raise ValueError("background must have zero conductivity and mass")
        elif self.density <= 0:
            raise ValueError(f"class {self.class_id}: density must be positive")
        if self.conductivity < 0:
            raise ValueError(f"class {self.class_id}: negative conductivity")
        if self.rel_permittivity < 1:
            raise ValueError(f"class {self.class_id}: rel_permittivity < 1")


def tissue_table(frequency, overrides=None):
    """Property table indexed by class id for the given frequency in MHz.

    Frequencies without a stored entry use the nearest stored one.
    ``overrides`` maps ``"<tissue>.<conductivity|density|rel_permittivity>"``
    to a float.
    """
    nearest = min(_TISSUE_VALUES, key=lambda f: abs(f - float(frequency)))
    values = {name: list(v) for name, v in _TISSUE_VALUES[nearest].items()}
    slots = {"conductivity": 0, "density": 1, "rel_permittivity": 2}
    for key, value in (overrides or {}).items():
        tissue, _, prop = key.partition(".")
        if tissue not in values or prop not in slots:
            raise InvalidSpecError(f"unknown tissue override {key!r}")
        values[tissue][slots[prop]] = float(value)
    table = [TissueProperties(BACKGROUND, 0.0, 0.0, 1.0)]
    for class_id, name in enumerate(CLASS_NAMES[1:], start=1):
        table.append(TissueProperties(class_id, *values[name]))
    return tuple(table)


@dataclass
class TissueGrid:
    """Rasterized phantom: a class id per cell plus the property table."""

    classes: np.ndarray
    property_table: tuple
    cell_size: float
    slice_thickness: float = 0.005

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int8)
        if self.classes.ndim != 2:
            raise ValueError("classes must be a 2D grid")
        if self.cell_size <= 0 or self.slice_thickness <= 0:
            raise ValueError("cell_size and slice_thickness must be positive")
        if self.classes.min() < 0 or self.classes.max() >= len(self.property_table):
            raise ValueError("class id outside the property table")

    @property
    def height(self):
        return self.classes.shape[0]

    @property
    def width(self):
        return self.classes.shape[1]

    @property
    def shape(self):
        return self.classes.shape

    def _lookup(self, attr):
        values = np.array([getattr(p, attr) for p in self.property_table], dtype=np.float64)
        return values[self.classes]

    def conductivity(self):
        return self._lookup("conductivity")

    def density(self):
        return self._lookup("density")

    def permittivity(self):
        return self._lookup("rel_permittivity")

    def cell_mass(self):
        """Mass of each cell in kg (zero on background)."""
        return self.density() * (self.cell_size**2 * self.slice_thickness)

    def coordinates(self):
        """Cell-center (x, y) coordinates in meters, origin at the grid center."""
        return cell_coordinates(self.shape, self.cell_size)


def cell_coordinates(shape, cell_size):
    h, w = shape
    x = (np.arange(w) - (w - 1) / 2.0) * cell_size
    y = (np.arange(h) - (h - 1) / 2.0) * cell_size
    return np.meshgrid(x, y)


@dataclass(frozen=True)
class CoilModel:
    """Birdcage coil driven in quadrature (circular polarization)."""

    rung_count: int = 16
    rung_radius: float = 0.20
    shield_radius: float = 0.23
    frequency: float = 128.0

    def __post_init__(self):
        if self.rung_count < 3:
            raise ValueError("a birdcage needs at least 3 rungs")
        if not self.shield_radius > self.rung_radius > 0:
            raise ValueError("need shield_radius > rung_radius > 0")
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")

    @property
    def rung_angles(self):
        return 2 * np.pi * np.arange(self.rung_count) / self.rung_count

    @property
    def drive(self):
        return np.exp(1j * self.rung_angles)

    @property
    def rung_positions(self):
        a = self.rung_angles
        return np.stack([self.rung_radius * np.cos(a), self.rung_radius * np.sin(a)], axis=1)

    @property
    def omega(self):
        return 2 * np.pi * self.frequency * 1e6


FIELD_FREQUENCIES = {"3T": 128.0, "7T": 297.0}


def coil_preset(field_tag, **overrides):
    try:
        frequency = FIELD_FREQUENCIES[field_tag]
    except KeyError:
        raise ValueError(f"unknown field preset {field_tag!r}; expected 3T or 7T") from None
    return CoilModel(frequency=frequency, **overrides)


@dataclass(frozen=True)
class Placement:
    offset_x: float = 0.0
    offset_y: float = 0.0
    rotation: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    """Shape parameters for the phantom generator.

    Lengths in meters. The grid spans ``field_of_view`` on each side with
    ``grid_size`` cells.
    """

    grid_size: int = 64
    field_of_view: float = 0.50
    slice_thickness: float = 0.005
    semi_axis_x: tuple = (0.100, 0.120)
    semi_axis_y: tuple = (0.120, 0.140)
    fat_thickness: tuple = (0.006, 0.012)
    min_inclusions: int = 1
    max_inclusions: int = 4
    inclusion_radius: tuple = (0.008, 0.018)
    csf_probability: float = 0.2
    frequency: float = 128.0
    # ("<tissue>.<property>", value) pairs applied on top of the tissue table
    tissue_overrides: tuple = ()

    @property
    def cell_size(self):
        return self.field_of_view / self.grid_size

    def validate(self):
        for name in ("semi_axis_x", "semi_axis_y", "fat_thickness", "inclusion_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise InvalidSpecError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.grid_size < 4 or self.field_of_view <= 0 or self.slice_thickness <= 0:
            raise InvalidSpecError("grid_size, field_of_view and slice_thickness must be positive")
        half = self.field_of_view / 2
        if max(self.semi_axis_x[1], self.semi_axis_y[1]) >= half:
            raise InvalidSpecError("phantom ellipse does not fit inside the grid")
        if self.fat_thickness[1] >= min(self.semi_axis_x[0], self.semi_axis_y[0]):
            raise InvalidSpecError("fat layer thicker than the phantom")
        if not 0 <= self.min_inclusions <= self.max_inclusions:
            raise InvalidSpecError("need 0 <= min_inclusions <= max_inclusions")
        if not 0 <= self.csf_probability <= 1:
            raise InvalidSpecError("csf_probability must lie in [0, 1]")
        self.properties()
        return self

    def properties(self):
        """Tissue table at this spec's frequency with overrides applied."""
        return tissue_table(self.frequency, dict(self.tissue_overrides))

    def area_fraction_bounds(self):
        """Bounds on the non-background area fraction of any generated phantom.

        Continuous ellipse area, widened by one cell-width band around the
        perimeter to absorb rasterization error.
        """
        total = self.field_of_view**2
        h = self.cell_size

        def perimeter(a, b):
            return math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))

        a0, b0 = self.semi_axis_x[0], self.semi_axis_y[0]
        a1, b1 = self.semi_axis_x[1], self.semi_axis_y[1]
        lo = (math.pi * a0 * b0 - perimeter(a0, b0) * h) / total
        hi = (math.pi * a1 * b1 + perimeter(a1, b1) * h) / total
        return max(lo, 0.0), hi


_FLOAT_PAIRS = ("semi_axis_x", "semi_axis_y", "fat_thickness", "inclusion_radius")


def parse_key_values(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidSpecError(f"line {lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def phantom_spec_from_mapping(mapping, base=None):
    """Spec from string key/values; ``<tissue>.<property>`` keys override the tissue table."""
    base = base or PhantomSpec()
    known = {f.name for f in fields(PhantomSpec)} - {"tissue_overrides"}
    updates = {}
    overrides = dict(base.tissue_overrides)
    for key, value in mapping.items():
        try:
            if "." in key:
                overrides[key] = float(value)
            elif key not in known:
                raise InvalidSpecError(f"unknown phantom spec key {key!r}")
            elif key in _FLOAT_PAIRS:
                parts = [float(p) for p in str(value).replace(",", " ").split()]
                if len(parts) != 2:
                    raise InvalidSpecError(f"{key} needs two values (min, max)")
                updates[key] = tuple(parts)
            elif key in ("grid_size", "min_inclusions", "max_inclusions"):
                updates[key] = int(value)
            else:
                updates[key] = float(value)
        except ValueError as exc:
            if isinstance(exc, InvalidSpecError):
                raise
            raise InvalidSpecError(f"bad value for {key}: {value!r}") from None
    updates["tissue_overrides"] = tuple(sorted(overrides.items()))
    return replace(base, **updates).validate()


def load_phantom_spec(path, base=None):
    return phantom_spec_from_mapping(parse_key_values(Path(path).read_text()), base)


@dataclass(frozen=True)
class Inclusion:
    x: float
    y: float
    radius: float
    class_id: int


@dataclass(frozen=True)
class PhantomShape:
    """Geometric description of one phantom, centered at the origin."""

    semi_axis_x: float
    semi_axis_y: float
    fat_thickness: float
    inclusions: tuple = field(default_factory=tuple)

    def bounding_corners(self, placement=Placement()):
        """Corners of the placed (possibly rotated) bounding box, shape (4, 2)."""
        a, b = self.semi_axis_x, self.semi_axis_y
        corners = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
        c, s = math.cos(placement.rotation), math.sin(placement.rotation)
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + [placement.offset_x, placement.offset_y]

    def fits_inside(self, coil, placement=Placement()):
        radii = np.hypot(*self.bounding_corners(placement).T)
        return bool(np.all(radii < coil.rung_radius))

    def rasterize(self, spec, placement=Placement(), properties=None):
        h = spec.cell_size
        n = spec.grid_size
        x, y = cell_coordinates((n, n), h)
        # cell centers in the phantom's own frame
        c, s = math.cos(placement.rotation), math.sin(placement.rotation)
        dx, dy = x - placement.offset_x, y - placement.offset_y
        u = c * dx + s * dy
        v = -s * dx + c * dy

        a, b, t = self.semi_axis_x, self.semi_axis_y, self.fat_thickness
        classes = np.zeros((n, n), dtype=np.int8)
        classes[(u / a) ** 2 + (v / b) ** 2 < 1] = FAT
        classes[(u / (a - t)) ** 2 + (v / (b - t)) ** 2 < 1] = MUSCLE
        muscle = classes == MUSCLE
        for inc in self.inclusions:
            inside = (u - inc.x) ** 2 + (v - inc.y) ** 2 < inc.radius**2
            classes[inside & muscle] = inc.class_id
        if properties is None:
            properties = spec.properties()
        return TissueGrid(classes, properties, h, spec.slice_thickness)


def draw_phantom(seed, spec=PhantomSpec()):
    """Draw a phantom geometry from a seeded generator."""
    spec.validate()
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    a = rng.uniform(*spec.semi_axis_x)
    b = rng.uniform(*spec.semi_axis_y)
    t = rng.uniform(*spec.fat_thickness)
    count = int(rng.integers(spec.min_inclusions, spec.max_inclusions + 1))
    inclusions = []
    for _ in range(count):
        r = rng.uniform(*spec.inclusion_radius)
        # keep the center where at least part of the circle sits in muscle
        ai, bi = max(a - t - r, 0.0), max(b - t - r, 0.0)
        theta = rng.uniform(0, 2 * np.pi)
        rho = math.sqrt(rng.uniform(0, 1))
        class_id = CSF if rng.uniform() < spec.csf_probability else BONE
        inclusions.append(
            Inclusion(ai * rho * math.cos(theta), bi * rho * math.sin(theta), r, class_id)
        )
    return PhantomShape(a, b, t, tuple(inclusions))


def make_phantom(seed, spec=PhantomSpec(), placement=Placement()):
    """Deterministic phantom grid for ``seed``, optionally placed off-center."""
    grid = draw_phantom(seed, spec).rasterize(spec, placement)
    if not grid.classes.any():
        raise InvalidSpecError("phantom has no tissue cells at this resolution")
    return grid


def enumerate_placements(shape, coil, ranges, counts):
    """Evenly spaced placement sweep filtered to positions inside the coil.

    ``ranges`` is ``((xmin, xmax), (ymin, ymax))`` in meters, ``counts`` is
    ``(nx, ny)``. Ordering is row-major: y outer, x inner.
    """
    (xmin, xmax), (ymin, ymax) = ranges
    nx, ny = counts
    if nx < 1 or ny < 1:
        raise ValueError("placement counts must be >= 1 per axis")
    if not all(math.isfinite(v) for v in (xmin, xmax, ymin, ymax)):
        raise ValueError("placement ranges must be finite")
    xs = np.linspace(xmin, xmax, nx) if nx > 1 else np.array([(xmin + xmax) / 2])
    ys = np.linspace(ymin, ymax, ny) if ny > 1 else np.array([(ymin + ymax) / 2])
    placements = []
    for y, x in itertools.product(ys, xs):
        p = Placement(float(x), float(y))
        if shape.fits_inside(coil, p):
            placements.append(p)
    if not placements:
        raise NoValidPlacementError("no placement keeps the phantom inside the coil")
    return placements


def rasterize_mask(grid):
    """Binary tissue mask (1 on tissue, 0 on background) as float32."""
    return (grid.classes != BACKGROUND).astype(np.float32)
