"""DRAM module model: row mappings, BER profiles, and calibrated cell populations.

A ``ModuleProfile`` describes a module statically (geometry, manufacturer,
logical-to-physical row mapping, and a cubic polynomial giving the expected
RowHammer flips per row as a function of temperature).  ``build_module``
turns a profile plus a 64-bit seed into a ``SimulatedModule``: a frozen,
deterministic population of vulnerable cells whose expected flips per row
reproduce the profile's cubic at every integer temperature of the domain.

Two kinds of cells are planted:

* Band cells are vulnerable over a temperature interval at least 2 C wide.
  Their per-trial flip probabilities are rescaled per temperature so the
  population's expected flip count matches ``rows * ber_scale * cubic(t)``.
* Canary cells are vulnerable at exactly one integer temperature and flip
  with ``canary_flip_prob`` per trial.  They model the cells the attack
  enrolls for cheap temperature sensing, and are excluded from the BER
  calibration (their mass is ~0.1% of the band population's).

Cell populations are never stored whole: cells are regenerated on demand in
fixed 512-row chunks from Philox streams keyed by (seed, chunk), so a
24K-row module costs a few MB regardless of how many cells it hosts.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Iterator

import numpy as np

from .errors import AddressError, CalibrationError, ConfigError, TemperatureDomainError
from .rng import keyed_generator

DEFAULT_ROWS = 24576
DEFAULT_COLUMNS = 65536               # bits per row (8 KB)
DEFAULT_TEMP_DOMAIN = (50, 95)
HAMMER_COUNT_REF = 150_000            # activations per aggressor in the reference tests

BAND_PROB_RANGE = (0.05, 0.5)         # per-trial flip probability before rescaling
BAND_WIDTH_RANGE = (2, 46)            # vulnerable-interval width in C
BAND_CELLS_PER_ROW_MIN = 64
CHUNK_ROWS = 512
CALIBRATION_RTOL = 1e-3

# Band cells are rescaled by s(t) <= this; with max base prob 0.5 nothing clips.
_SCALE_DESIGN = 1.7
_SCALE_NOCLIP = 1.0 / BAND_PROB_RANGE[1]

_TAG_CELLS = 0x11
_TAG_CANARY = 0x22


class MappingKind(enum.Enum):
    SEQUENTIAL = "sequential"
    XOR_MFR_B = "xor_mfr_b"


class CellKind(enum.Enum):
    BAND = "band"
    CANARY = "canary"


@dataclass(frozen=True)
class RowMapping:
    """Logical-to-physical row address mapping, a bijection on [0, 2**width)."""

    kind: MappingKind
    width: int

    def __post_init__(self):
        if not 1 <= self.width <= 48:
            raise ConfigError(f"mapping width {self.width} out of range [1, 48]")

    @property
    def size(self) -> int:
        return 1 << self.width


def _check_range(mapping: RowMapping, row) -> None:
    rows = np.asarray(row)
    if rows.size and (np.any(rows < 0) or np.any(rows >= mapping.size)):
        raise AddressError(f"row address out of range for width {mapping.width}")


def map_logical_to_physical(mapping: RowMapping, row):
    """Map a logical row address (or array of them) to its physical position.

    Sequential is the identity.  The Mfr-B mapping rewrites address bits 1
    and 2 as phy[1] = log[3] ^ log[1] and phy[2] = log[2] ^ log[3], leaving
    every other bit in place.
    """
    _check_range(mapping, row)
    if mapping.kind is MappingKind.SEQUENTIAL:
        return row
    r = np.asarray(row, dtype=np.int64)
    b1 = ((r >> 3) ^ (r >> 1)) & 1
    b2 = ((r >> 2) ^ (r >> 3)) & 1
    phys = (r & ~np.int64(0b110)) | (b1 << 1) | (b2 << 2)
    return int(phys) if np.isscalar(row) or np.ndim(row) == 0 else phys


def map_physical_to_logical(mapping: RowMapping, row):
    """Inverse of ``map_logical_to_physical``.

    Solving the XOR system gives log[1] = phy[1] ^ phy[3] and
    log[2] = phy[2] ^ phy[3], i.e. the same bit rewrite again: the Mfr-B
    mapping is an involution.
    """
    _check_range(mapping, row)
    if mapping.kind is MappingKind.SEQUENTIAL:
        return row
    return map_logical_to_physical(mapping, row)


# Data-pattern sensitivity knobs default to 1.0 (the published tests never
# quantify pattern deltas); keys follow the worst-case-pattern search order.
PATTERN_NAMES = (
    "colstripe",
    "checkered",
    "rowstripe",
    "random",
    "colstripe_inv",
    "checkered_inv",
    "rowstripe_inv",
)


@dataclass(frozen=True)
class ModuleProfile:
    """Static description of one DRAM module."""

    module_id: int
    manufacturer: str                       # "A" | "B" | "C" | "D"
    ber_cubic: tuple[float, float, float, float]   # (c3, c2, c1, c0), flips/row vs C
    mapping: RowMapping
    single_sided_asymmetric: bool
    rows: int = DEFAULT_ROWS
    columns_per_row: int = DEFAULT_COLUMNS
    temp_domain: tuple[int, int] = DEFAULT_TEMP_DOMAIN
    ber_scale: float = 1.0
    canary_density: float = 30.0
    canary_flip_prob: float = 0.8
    single_sided_factor: float = 0.5
    band_cells_per_row: int | None = None   # None = size automatically from the cubic
    pattern_multipliers: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.module_id < 1:
            raise ConfigError("module_id must be >= 1")
        if self.manufacturer not in ("A", "B", "C", "D"):
            raise ConfigError(f"unknown manufacturer {self.manufacturer!r}")
        if self.rows < 4:
            raise ConfigError("rows must be >= 4")
        if self.rows > self.mapping.size:
            raise ConfigError("mapping width too small for row count")
        if self.columns_per_row < 16:
            raise ConfigError("columns_per_row must be >= 16")
        t0, t1 = self.temp_domain
        if int(t0) != t0 or int(t1) != t1 or t1 - t0 < 2:
            raise ConfigError("temp_domain must be an integer range spanning >= 2 C")
        if self.ber_scale < 0:
            raise ConfigError("ber_scale must be >= 0")
        if self.ber_scale > 0 and np.any(self._cubic_on_grid() <= 0):
            raise ConfigError("ber_cubic must be strictly positive on the temperature grid")
        if self.canary_density < 0:
            raise ConfigError("canary_density must be >= 0")
        if not 0 < self.canary_flip_prob <= 1:
            raise ConfigError("canary_flip_prob must be in (0, 1]")
        if not 0 <= self.single_sided_factor <= 1:
            raise ConfigError("single_sided_factor must be in [0, 1]")
        if self.band_cells_per_row is not None and self.band_cells_per_row < 0:
            raise ConfigError("band_cells_per_row must be >= 0")
        for name in self.pattern_multipliers:
            if name not in PATTERN_NAMES:
                raise ConfigError(f"unknown data pattern {name!r}")

    def _cubic_on_grid(self) -> np.ndarray:
        return np.polyval(self.ber_cubic, self.temp_grid())

    def temp_grid(self) -> np.ndarray:
        t0, t1 = self.temp_domain
        return np.arange(t0, t1 + 1)

    def temp_index(self, temp_c: int) -> int:
        t0, t1 = self.temp_domain
        if int(temp_c) != temp_c or not t0 <= temp_c <= t1:
            raise TemperatureDomainError(
                f"temperature {temp_c} outside integer grid [{t0}, {t1}]"
            )
        return int(temp_c) - t0

    def pattern_multiplier(self, pattern_name: str) -> float:
        return self.pattern_multipliers.get(pattern_name, 1.0)


def expected_ber(profile: ModuleProfile, temp_c: float) -> float:
    """Expected flips per row at ``temp_c``: ber_scale * cubic(temp_c)."""
    t0, t1 = profile.temp_domain
    if not t0 <= temp_c <= t1:
        raise TemperatureDomainError(f"temperature {temp_c} outside [{t0}, {t1}]")
    return profile.ber_scale * float(np.polyval(profile.ber_cubic, temp_c))


@dataclass(frozen=True)
class CellProfile:
    """One vulnerable cell; canaries have a single-point band (t_lo == t_hi)."""

    coord: tuple[int, int]                  # (physical_row, bit_index)
    kind: CellKind
    band: tuple[int, int]
    base_prob: float


# ---------------------------------------------------------------------------
# profile (de)serialization

def profile_to_dict(profile: ModuleProfile) -> dict:
    d = {
        "module_id": profile.module_id,
        "manufacturer": profile.manufacturer,
        "rows": profile.rows,
        "columns_per_row": profile.columns_per_row,
        "mapping": {"kind": profile.mapping.kind.value, "width": profile.mapping.width},
        "ber_cubic": list(profile.ber_cubic),
        "temp_domain": list(profile.temp_domain),
        "single_sided_asymmetric": profile.single_sided_asymmetric,
        "ber_scale": profile.ber_scale,
        "canary_density": profile.canary_density,
        "canary_flip_prob": profile.canary_flip_prob,
        "single_sided_factor": profile.single_sided_factor,
    }
    if profile.band_cells_per_row is not None:
        d["band_cells_per_row"] = profile.band_cells_per_row
    if profile.pattern_multipliers:
        d["pattern_multipliers"] = dict(profile.pattern_multipliers)
    return d


def profile_from_dict(d: dict) -> ModuleProfile:
    try:
        mapping = RowMapping(MappingKind(d["mapping"]["kind"]), int(d["mapping"]["width"]))
        cubic = tuple(float(c) for c in d["ber_cubic"])
        if len(cubic) != 4:
            raise ConfigError("ber_cubic must have 4 coefficients (c3, c2, c1, c0)")
        return ModuleProfile(
            module_id=int(d["module_id"]),
            manufacturer=str(d["manufacturer"]),
            ber_cubic=cubic,
            mapping=mapping,
            single_sided_asymmetric=bool(d["single_sided_asymmetric"]),
            rows=int(d.get("rows", DEFAULT_ROWS)),
            columns_per_row=int(d.get("columns_per_row", DEFAULT_COLUMNS)),
            temp_domain=tuple(int(t) for t in d.get("temp_domain", DEFAULT_TEMP_DOMAIN)),
            ber_scale=float(d.get("ber_scale", 1.0)),
            canary_density=float(d.get("canary_density", 30.0)),
            canary_flip_prob=float(d.get("canary_flip_prob", 0.8)),
            single_sided_factor=float(d.get("single_sided_factor", 0.5)),
            band_cells_per_row=(
                int(d["band_cells_per_row"]) if "band_cells_per_row" in d else None
            ),
            pattern_multipliers={
                str(k): float(v) for k, v in d.get("pattern_multipliers", {}).items()
            },
        )
    except KeyError as exc:
        raise ConfigError(f"profile is missing field {exc}") from exc


def load_profile(path) -> ModuleProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return profile_from_dict(json.load(fh))


def save_profile(profile: ModuleProfile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile_to_dict(profile), fh, indent=2, sort_keys=True)
        fh.write("\n")


def shipped_profile(module_id: int) -> ModuleProfile:
    """Load one of the 12 bundled module profiles (module_01.json .. module_12.json)."""
    if not 1 <= module_id <= 12:
        raise ConfigError("shipped profiles are numbered 1..12")
    name = f"module_{module_id:02d}.json"
    data = resources.files("spyhammer.profiles").joinpath(name).read_text("utf-8")
    return profile_from_dict(json.loads(data))


def shipped_profiles() -> list[ModuleProfile]:
    return [shipped_profile(i) for i in range(1, 13)]


def sibling_profile(profile: ModuleProfile, ber_scale: float) -> ModuleProfile:
    """Same-model donor: identical cubic and geometry, different overall BER level."""
    return replace(profile, ber_scale=ber_scale)


# ---------------------------------------------------------------------------
# band-cell generation

@lru_cache(maxsize=8)
def _band_coverage(temp_domain: tuple[int, int]) -> np.ndarray:
    """Probability that a generated band covers each grid temperature.

    Exact enumeration of the (width, start) lattice used by
    ``_generate_band_chunk``; drives the automatic population sizing.
    """
    t0, t1 = temp_domain
    span = t1 - t0
    grid_n = span + 1
    cov = np.zeros(grid_n)
    w_lo, w_hi = BAND_WIDTH_RANGE
    n_widths = w_hi - w_lo + 1
    for w in range(w_lo, w_hi + 1):
        n_raw = span + w + 1
        pr = 1.0 / (n_widths * n_raw)
        for raw in range(t0 - w, t1 + 1):
            lo = min(max(raw, t0), t1 - 2)
            hi = max(min(raw + w, t1), lo + 2)
            cov[lo - t0 : hi - t0 + 1] += pr
    return cov


def _auto_cells_per_row(profile: ModuleProfile) -> int:
    target = profile.ber_scale * profile._cubic_on_grid()   # flips per row
    if np.all(target <= 0):
        return BAND_CELLS_PER_ROW_MIN
    cov = _band_coverage(profile.temp_domain)
    mean_p = 0.5 * (BAND_PROB_RANGE[0] + BAND_PROB_RANGE[1])
    need = np.max(target / (cov * mean_p * _SCALE_DESIGN))
    return max(BAND_CELLS_PER_ROW_MIN, math.ceil(need * 1.05))


def _generate_band_chunk(seed: int, profile: ModuleProfile, cpr: int, chunk: int):
    """Regenerate the band cells of one 512-row chunk (deterministic in (seed, chunk)).

    Returns (row0, n_rows, bit, t_lo, t_hi, prob); cell arrays have shape
    (n_rows, cpr).  Bits are stratified over the upper half of the row so
    they never collide with each other or with canary cells (canaries live
    in the lower half).
    """
    t0, t1 = profile.temp_domain
    span = t1 - t0
    row0 = chunk * CHUNK_ROWS
    n_rows = min(CHUNK_ROWS, profile.rows - row0)
    n = n_rows * cpr
    g = keyed_generator(seed, _TAG_CELLS, chunk)

    w = g.integers(BAND_WIDTH_RANGE[0], BAND_WIDTH_RANGE[1] + 1, size=n)
    raw = (t0 - w) + np.floor(g.random(n) * (span + w + 1)).astype(np.int64)
    lo = np.minimum(np.maximum(raw, t0), t1 - 2)
    hi = np.maximum(np.minimum(raw + w, t1), lo + 2)

    p_lo, p_hi = BAND_PROB_RANGE
    prob = (p_lo + g.random(n) * (p_hi - p_lo)).astype(np.float32)

    half = profile.columns_per_row // 2
    stride = half // cpr
    base = half + (np.tile(np.arange(cpr, dtype=np.int64), n_rows) * stride)
    bit = base + g.integers(0, stride, size=n)

    shape = (n_rows, cpr)
    return (
        row0,
        n_rows,
        bit.reshape(shape).astype(np.uint32),
        lo.reshape(shape).astype(np.int16),
        hi.reshape(shape).astype(np.int16),
        prob.reshape(shape),
    )


def _plant_canaries(seed: int, profile: ModuleProfile):
    """Draw canary cells: per grid temperature, Poisson(density) cells floored at 1.

    Coordinates are globally unique, placed in interior rows (edge rows have
    no aggressor pair) and in the lower half of the bit space.
    """
    grid = profile.temp_grid()
    rows_arr: list[int] = []
    bits_arr: list[int] = []
    temps_arr: list[int] = []
    if profile.canary_density > 0 and profile.rows >= 4:
        g = keyed_generator(seed, _TAG_CANARY)
        half = profile.columns_per_row // 2
        seen: set[tuple[int, int]] = set()
        for t in grid:
            count = max(1, int(g.poisson(profile.canary_density)))
            placed = 0
            while placed < count:
                r = int(g.integers(1, profile.rows - 1))
                b = int(g.integers(0, half))
                if (r, b) in seen:
                    continue
                seen.add((r, b))
                rows_arr.append(r)
                bits_arr.append(b)
                temps_arr.append(int(t))
                placed += 1
    return (
        np.asarray(rows_arr, dtype=np.int64),
        np.asarray(bits_arr, dtype=np.uint32),
        np.asarray(temps_arr, dtype=np.int64),
    )


class SimulatedModule:
    """A calibrated module instance; immutable after build, safe to share.

    ``scale_first``/``scale_second`` realize the per-temperature rescale:
    a band cell with base probability p flips per trial with

        eff(p, t) = 1                          if scale_first[t] * p >= 1
                    min(scale_second[t] * p, 1) otherwise

    When no clipping is needed (every automatically sized profile) the two
    arrays are equal and the min never binds.
    """

    def __init__(self, profile, seed, cells_per_row, scale_first, scale_second,
                 band_lam, canary_rows, canary_bits, canary_temps):
        self.profile = profile
        self.seed = int(seed)
        self.cells_per_row = int(cells_per_row)
        self.scale_first = scale_first
        self.scale_second = scale_second
        self._band_lam = band_lam            # (rows, grid) float32, Σ eff per row/temp
        self._canary_rows = canary_rows
        self._canary_bits = canary_bits
        self._canary_temps = canary_temps
        self._chunk_cache = lru_cache(maxsize=16)(self._load_chunk)

    # -- geometry ----------------------------------------------------------

    @property
    def rows(self) -> int:
        return self.profile.rows

    @property
    def temp_grid(self) -> np.ndarray:
        return self.profile.temp_grid()

    def logical_to_physical(self, row):
        return map_logical_to_physical(self.profile.mapping, row)

    def physical_to_logical(self, row):
        return map_physical_to_logical(self.profile.mapping, row)

    # -- cell access -------------------------------------------------------

    def _load_chunk(self, chunk: int):
        return _generate_band_chunk(self.seed, self.profile, self.cells_per_row, chunk)

    def n_chunks(self) -> int:
        return (self.rows + CHUNK_ROWS - 1) // CHUNK_ROWS

    def band_chunk(self, chunk: int):
        return self._chunk_cache(chunk)

    def band_cells_of_row(self, phys_row: int):
        """(bit, t_lo, t_hi, base_prob) arrays for one physical row."""
        if not 0 <= phys_row < self.rows:
            raise AddressError(f"row {phys_row} outside module of {self.rows} rows")
        row0, _, bit, lo, hi, prob = self.band_chunk(phys_row // CHUNK_ROWS)
        i = phys_row - row0
        return bit[i], lo[i], hi[i], prob[i]

    def band_effective_probs(self, prob: np.ndarray, temp_idx: int) -> np.ndarray:
        s1 = self.scale_first[temp_idx]
        s2 = self.scale_second[temp_idx]
        eff = np.minimum(s2 * prob.astype(np.float64), 1.0)
        if s1 * BAND_PROB_RANGE[1] >= 1.0:
            eff[s1 * prob >= 1.0] = 1.0
        return eff

    def canaries_at(self, temp_c: int):
        """(rows, bits) arrays of the canaries planted at exactly ``temp_c``."""
        sel = self._canary_temps == int(temp_c)
        return self._canary_rows[sel], self._canary_bits[sel]

    def planted_canaries(self) -> dict[int, set[tuple[int, int]]]:
        """Ground-truth canary map, keyed by temperature (for tests/analysis)."""
        out: dict[int, set[tuple[int, int]]] = {int(t): set() for t in self.temp_grid}
        for r, b, t in zip(self._canary_rows, self._canary_bits, self._canary_temps):
            out[int(t)].add((int(r), int(b)))
        return out

    def iter_cells(self, phys_row: int) -> Iterator[CellProfile]:
        """All cells of one row as ``CellProfile`` records (introspection path)."""
        bit, lo, hi, prob = self.band_cells_of_row(phys_row)
        for j in range(bit.shape[0]):
            yield CellProfile(
                (phys_row, int(bit[j])), CellKind.BAND,
                (int(lo[j]), int(hi[j])), float(prob[j]),
            )
        sel = self._canary_rows == phys_row
        for b, t in zip(self._canary_bits[sel], self._canary_temps[sel]):
            yield CellProfile(
                (phys_row, int(b)), CellKind.CANARY,
                (int(t), int(t)), self.profile.canary_flip_prob,
            )

    # -- aggregate means ---------------------------------------------------

    def band_row_means(self, temp_idx: int) -> np.ndarray:
        """Σ of band-cell effective probabilities per physical row (float64)."""
        return self._band_lam[:, temp_idx].astype(np.float64)

    def row_means(self, temp_c: int) -> np.ndarray:
        """Expected flips per physical row at 150K double-sided hammers."""
        ti = self.profile.temp_index(temp_c)
        lam = self.band_row_means(ti)
        c_rows, _ = self.canaries_at(temp_c)
        if c_rows.size:
            np.add.at(lam, c_rows, self.profile.canary_flip_prob)
        return lam

    def population_mass(self, temp_c: int) -> float:
        """Σ of band-cell effective probabilities over the whole module."""
        ti = self.profile.temp_index(temp_c)
        return float(np.sum(self._band_lam[:, ti], dtype=np.float64))

    def target_total(self, temp_c: int) -> float:
        """Calibration target: rows * ber_scale * cubic(temp_c)."""
        return self.rows * expected_ber(self.profile, temp_c)


def build_module(profile: ModuleProfile, seed: int) -> SimulatedModule:
    """Build the deterministic cell population for (profile, seed).

    The band population is swept once to measure its raw probability mass
    per temperature; the per-temperature scale is then target / mass.  If a
    profile pins ``band_cells_per_row`` so low that scaling forces
    probabilities past 1, cells clip at 1 and the remaining mass is rescaled
    once more; if the population still cannot carry the target, a
    ``CalibrationError`` names the first offending temperature.
    """
    cpr = (
        profile.band_cells_per_row
        if profile.band_cells_per_row is not None
        else _auto_cells_per_row(profile)
    )
    if cpr > profile.columns_per_row // 2:
        raise ConfigError(
            f"band_cells_per_row {cpr} exceeds the {profile.columns_per_row // 2} "
            "bit positions available per row; BER target too high for the geometry"
        )

    grid = profile.temp_grid()
    grid_n = grid.size
    t0 = profile.temp_domain[0]
    n_chunks = (profile.rows + CHUNK_ROWS - 1) // CHUNK_ROWS

    row_mass = np.zeros((profile.rows, grid_n))
    if cpr > 0:
        for chunk in range(n_chunks):
            row0, n_rows, _, lo, hi, prob = _generate_band_chunk(seed, profile, cpr, chunk)
            # Difference trick: add p at t_lo, subtract past t_hi, prefix-sum over temps.
            flat_rows = np.repeat(np.arange(n_rows), cpr)
            diff = np.zeros((n_rows, grid_n + 1))
            p64 = prob.astype(np.float64).ravel()
            np.add.at(diff, (flat_rows, (lo.ravel() - t0)), p64)
            np.add.at(diff, (flat_rows, (hi.ravel() - t0 + 1)), -p64)
            row_mass[row0 : row0 + n_rows] = np.cumsum(diff, axis=1)[:, :grid_n]

    mass = row_mass.sum(axis=0)
    target = np.array([profile.rows * expected_ber(profile, int(t)) for t in grid])

    with np.errstate(divide="ignore", invalid="ignore"):
        s_first = np.where(mass > 0, target / mass, 0.0)
    if np.any((target > 0) & (mass <= 0)):
        bad = int(grid[np.argmax((target > 0) & (mass <= 0))])
        raise CalibrationError(bad, "no band cells cover a temperature with positive target")

    if np.all(s_first * BAND_PROB_RANGE[1] <= 1.0):
        # No clipping anywhere: scaling is exact and Σ eff == target by construction.
        s_second = s_first.copy()
        band_lam = (row_mass * s_first[np.newaxis, :]).astype(np.float32)
    else:
        s_second, band_lam = _calibrate_with_clipping(
            profile, seed, cpr, grid, target, mass, s_first
        )

    c_rows, c_bits, c_temps = _plant_canaries(seed, profile)
    return SimulatedModule(
        profile, seed, cpr, s_first, s_second, band_lam, c_rows, c_bits, c_temps
    )


def _calibrate_with_clipping(profile, seed, cpr, grid, target, mass, s_first):
    """Clip-and-repair path for explicitly undersized populations.

    Round 1 scales by target/mass and clips at 1; round 2 rescales the
    unclipped cells to make up the clipped shortfall.  More than one repair
    round is not attempted: if the population still misses the target by
    more than ``CALIBRATION_RTOL``, calibration fails.
    """
    t0 = profile.temp_domain[0]
    grid_n = grid.size
    n_chunks = (profile.rows + CHUNK_ROWS - 1) // CHUNK_ROWS

    clip_count = np.zeros(grid_n)
    unclipped_mass = np.zeros(grid_n)
    for chunk in range(n_chunks):
        _, _, _, lo, hi, prob = _generate_band_chunk(seed, profile, cpr, chunk)
        lo_f, hi_f, p_f = lo.ravel(), hi.ravel(), prob.astype(np.float64).ravel()
        for ti in range(grid_n):
            t = t0 + ti
            covered = (lo_f <= t) & (t <= hi_f)
            p_cov = p_f[covered]
            clipped = s_first[ti] * p_cov >= 1.0
            clip_count[ti] += np.count_nonzero(clipped)
            unclipped_mass[ti] += p_cov[~clipped].sum()

    with np.errstate(divide="ignore", invalid="ignore"):
        s_second = np.where(
            unclipped_mass > 0, (target - clip_count) / unclipped_mass, s_first
        )
    s_second = np.where(s_first * BAND_PROB_RANGE[1] <= 1.0, s_first, s_second)

    band_lam = np.zeros((profile.rows, grid_n), dtype=np.float32)
    achieved = np.zeros(grid_n)
    for chunk in range(n_chunks):
        row0, n_rows, _, lo, hi, prob = _generate_band_chunk(seed, profile, cpr, chunk)
        flat_rows = np.repeat(np.arange(n_rows), cpr)
        lo_f, hi_f, p_f = lo.ravel(), hi.ravel(), prob.astype(np.float64).ravel()
        for ti in range(grid_n):
            t = t0 + ti
            covered = (lo_f <= t) & (t <= hi_f)
            eff = np.minimum(s_second[ti] * p_f[covered], 1.0)
            eff[s_first[ti] * p_f[covered] >= 1.0] = 1.0
            band_lam[row0 : row0 + n_rows, ti] += np.bincount(
                flat_rows[covered], weights=eff, minlength=n_rows
            ).astype(np.float32)
            achieved[ti] += eff.sum()

    rel = np.abs(achieved - target) / np.where(target > 0, target, 1.0)
    bad = (target > 0) & (rel > CALIBRATION_RTOL)
    if np.any(bad):
        t_bad = int(grid[np.argmax(bad)])
        raise CalibrationError(
            t_bad,
            "target BER exceeds population capacity even after one rescale-and-clip pass",
        )
    return s_second, band_lam
