"""RowHammer access-sequence simulation against a ``SimulatedModule``.

Aggregate fidelity draws a Poisson count per victim row with mean equal to
the row's summed effective cell probabilities (cells are independent and
per-row means are small to moderate, so the Poisson approximation of the
Poisson-binomial sum is well inside the test tolerances).  Cell-accurate
fidelity samples every vulnerable cell of the victim row individually and
reports flip coordinates.

All draws are keyed by (seed, temperature, repetition, pattern, ...), so a
measurement is a pure function of its arguments: repeating it reproduces it
bit for bit, disjoint regions measured in the same repetition see consistent
per-row outcomes, and work units can be fanned out in any order.

With noise disabled, aggregate measurements return expectations instead of
draws (region BER becomes exactly ``ber_scale * cubic(t)``) and a cell flips
deterministically iff its effective probability reaches 1.  This gives the
idealized sensor used by the noiseless round-trip checks.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dram import HAMMER_COUNT_REF, SimulatedModule, expected_ber
from .errors import AddressError, ConfigError, EdgeRowError
from .rng import coord_uniforms, keyed_generator

_TAG_DOUBLE = 0x44
_TAG_SINGLE = 0x55


class PatternKind(enum.Enum):
    COLSTRIPE = "colstripe"
    CHECKERED = "checkered"
    ROWSTRIPE = "rowstripe"
    RANDOM = "random"


# (even-offset byte, odd-offset byte) written to victim row V and neighbors
# V +/- [1..8]; V itself is at offset 0 (even).  Random rows carry no fixed fill.
_PATTERN_FILLS = {
    PatternKind.COLSTRIPE: (0x55, 0x55),
    PatternKind.CHECKERED: (0x55, 0xAA),
    PatternKind.ROWSTRIPE: (0x00, 0xFF),
    PatternKind.RANDOM: None,
}


@dataclass(frozen=True)
class DataPattern:
    kind: PatternKind
    complement: bool = False

    def __post_init__(self):
        if self.kind is PatternKind.RANDOM and self.complement:
            raise ConfigError("the random pattern has no complement")

    @property
    def key(self) -> str:
        return self.kind.value + ("_inv" if self.complement else "")

    def fill_bytes(self) -> tuple[int, int] | None:
        """(even-offset byte, odd-offset byte), or None for random data."""
        fills = _PATTERN_FILLS[self.kind]
        if fills is None:
            return None
        if self.complement:
            return (fills[0] ^ 0xFF, fills[1] ^ 0xFF)
        return fills


COLSTRIPE = DataPattern(PatternKind.COLSTRIPE)
CHECKERED = DataPattern(PatternKind.CHECKERED)
ROWSTRIPE = DataPattern(PatternKind.ROWSTRIPE)
RANDOM = DataPattern(PatternKind.RANDOM)

# Worst-case search order; ties resolve to the earliest entry.
ALL_PATTERNS = (
    COLSTRIPE,
    CHECKERED,
    ROWSTRIPE,
    RANDOM,
    DataPattern(PatternKind.COLSTRIPE, complement=True),
    DataPattern(PatternKind.CHECKERED, complement=True),
    DataPattern(PatternKind.ROWSTRIPE, complement=True),
)

_PATTERN_ID = {p.key: i for i, p in enumerate(ALL_PATTERNS)}


class Fidelity(enum.Enum):
    AGGREGATE = "aggregate"
    CELL_ACCURATE = "cell"


@dataclass(frozen=True)
class FlipRecord:
    row: int            # physical row
    bit: int
    temp_c: int
    rep: int


@dataclass(frozen=True)
class BerSample:
    start_row: int
    row_count: int
    temp_c: int
    rep: int
    flips_per_row: float


def _hammer_scale(hammer_count: int) -> float:
    """Linear dose response below the 150K reference count, saturating above."""
    if hammer_count < 0:
        raise ConfigError("hammer_count must be >= 0")
    return min(hammer_count, HAMMER_COUNT_REF) / HAMMER_COUNT_REF


def _check_temp_rep(module: SimulatedModule, temp_c: int, rep: int) -> int:
    if rep < 0:
        raise ConfigError("repetition index must be >= 0")
    return module.profile.temp_index(temp_c)


def victim_row_means(
    module: SimulatedModule,
    temp_c: int,
    pattern: DataPattern = COLSTRIPE,
    hammer_count: int = HAMMER_COUNT_REF,
) -> np.ndarray:
    """Expected double-sided flips per victim physical row; edge rows are 0."""
    mult = module.profile.pattern_multiplier(pattern.key)
    lam = module.row_means(temp_c) * (mult * _hammer_scale(hammer_count))
    lam[0] = 0.0
    lam[-1] = 0.0
    return lam


def double_sided_row_counts(
    module: SimulatedModule,
    temp_c: int,
    rep: int,
    pattern: DataPattern = COLSTRIPE,
    hammer_count: int = HAMMER_COUNT_REF,
    noise: bool = True,
) -> np.ndarray:
    """One repetition's flip counts for every victim physical row of the module.

    All region and single-victim aggregate queries in the same (temperature,
    repetition, pattern, hammer count) slice read from this one vector.
    """
    ti = _check_temp_rep(module, temp_c, rep)
    lam = victim_row_means(module, temp_c, pattern, hammer_count)
    if not noise:
        return lam
    g = keyed_generator(
        module.seed, _TAG_DOUBLE, ti, rep, _PATTERN_ID[pattern.key], hammer_count
    )
    return g.poisson(lam)


def hammer_double_sided(
    module: SimulatedModule,
    victim_row: int,
    temp_c: int,
    rep: int,
    pattern: DataPattern = COLSTRIPE,
    hammer_count: int = HAMMER_COUNT_REF,
    fidelity: Fidelity = Fidelity.AGGREGATE,
    noise: bool = True,
):
    """Hammer both physical neighbors of a logical victim row.

    Aggregate fidelity returns the victim row's flip count (the expectation
    when noise is off); cell-accurate fidelity returns a tuple of
    ``FlipRecord`` with physical coordinates.
    """
    ti = _check_temp_rep(module, temp_c, rep)
    if not 0 <= victim_row < module.rows:
        raise AddressError(f"victim row {victim_row} outside module")
    phys = int(module.logical_to_physical(victim_row))
    if phys == 0 or phys == module.rows - 1:
        raise EdgeRowError(f"victim physical row {phys} has no aggressor pair")

    if fidelity is Fidelity.AGGREGATE:
        counts = double_sided_row_counts(module, temp_c, rep, pattern, hammer_count, noise)
        return counts[phys] if not noise else int(counts[phys])

    bits, eff = _row_cell_probs(module, phys, temp_c, ti, pattern, hammer_count)
    if noise:
        u = coord_uniforms(module.seed, phys, bits, temp_c, rep)
        flipped = bits[u < eff]
    else:
        flipped = bits[eff >= 1.0]
    return tuple(FlipRecord(phys, int(b), int(temp_c), rep) for b in flipped)


def _row_cell_probs(module, phys_row, temp_c, ti, pattern, hammer_count):
    """Effective per-trial probabilities of every cell vulnerable in one row."""
    factor = module.profile.pattern_multiplier(pattern.key) * _hammer_scale(hammer_count)
    bit, lo, hi, prob = module.band_cells_of_row(phys_row)
    covered = (lo <= temp_c) & (temp_c <= hi)
    bits = bit[covered].astype(np.int64)
    eff = np.minimum(module.band_effective_probs(prob[covered], ti) * factor, 1.0)
    c_rows, c_bits = module.canaries_at(temp_c)
    sel = c_rows == phys_row
    if np.any(sel):
        bits = np.concatenate([bits, c_bits[sel].astype(np.int64)])
        c_eff = min(module.profile.canary_flip_prob * factor, 1.0)
        eff = np.concatenate([eff, np.full(int(sel.sum()), c_eff)])
    order = np.argsort(bits)
    return bits[order], eff[order]


@dataclass(frozen=True)
class SingleSidedResult:
    """Per-neighbor flip counts; neighbors missing at the array edge are flagged."""

    aggressor_phys: int
    counts: dict[int, float]        # physical neighbor row -> flips
    missing: tuple[int, ...]        # neighbor offsets (-1/+1) absent at the edge


def hammer_single_sided(
    module: SimulatedModule,
    aggressor_row: int,
    temp_c: int,
    rep: int,
    pattern: DataPattern = COLSTRIPE,
    hammer_count: int = HAMMER_COUNT_REF,
    noise: bool = True,
) -> SingleSidedResult:
    """Hammer one logical row and observe flips in its physical neighbors.

    Single-sided intensity is the double-sided per-cell probability scaled
    by the profile's ``single_sided_factor``.  On asymmetric modules only
    the +1 physical neighbor is susceptible; the -1 neighbor reports 0.
    """
    ti = _check_temp_rep(module, temp_c, rep)
    if not 0 <= aggressor_row < module.rows:
        raise AddressError(f"aggressor row {aggressor_row} outside module")
    phys = int(module.logical_to_physical(aggressor_row))
    factor = module.profile.single_sided_factor
    base = module.row_means(temp_c)
    mult = module.profile.pattern_multiplier(pattern.key) * _hammer_scale(hammer_count)

    neighbors = []
    missing = []
    for off in (-1, 1):
        q = phys + off
        if not 0 <= q < module.rows:
            missing.append(off)
            continue
        lam = base[q] * factor * mult
        if module.profile.single_sided_asymmetric and off == -1:
            lam = 0.0
        neighbors.append((q, lam))

    if noise:
        g = keyed_generator(
            module.seed, _TAG_SINGLE, phys, ti, rep, _PATTERN_ID[pattern.key], hammer_count
        )
        drawn = g.poisson([lam for _, lam in neighbors]) if neighbors else []
        counts = {q: int(c) for (q, _), c in zip(neighbors, drawn)}
    else:
        counts = {q: lam for q, lam in neighbors}
    return SingleSidedResult(phys, counts, tuple(missing))


def _region_phys_mask(module: SimulatedModule, region: tuple[int, int]) -> np.ndarray:
    start, count = region
    if count < 1 or start < 0 or start + count > module.rows:
        raise ConfigError(f"region {region} invalid for module of {module.rows} rows")
    logical = np.arange(start, start + count)
    phys = np.asarray(module.logical_to_physical(logical))
    mask = np.zeros(module.rows, dtype=bool)
    mask[phys] = True
    return mask


def region_row_counts(
    module: SimulatedModule,
    region: tuple[int, int],
    temp_c: int,
    rep: int,
    pattern: DataPattern = COLSTRIPE,
    hammer_count: int = HAMMER_COUNT_REF,
    noise: bool = True,
) -> np.ndarray:
    """Per-victim-row flip counts for one double-sided sweep of a logical region."""
    mask = _region_phys_mask(module, region)
    counts = double_sided_row_counts(module, temp_c, rep, pattern, hammer_count, noise)
    return counts[mask]


def measure_region_ber(
    module: SimulatedModule,
    region: tuple[int, int],
    temp_c: int,
    repetitions: int,
    pattern: DataPattern = COLSTRIPE,
    hammer_count: int = HAMMER_COUNT_REF,
    noise: bool = True,
    rep_offset: int = 0,
) -> list[BerSample]:
    """Hammer every row of the region double-sided, once per repetition.

    Returns one ``BerSample`` per repetition with flips_per_row = total
    flips / row_count.  Noise off yields the profile's exact expected BER.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    start, count = region
    samples = []
    for rep in range(rep_offset, rep_offset + repetitions):
        if noise:
            total = float(region_row_counts(
                module, region, temp_c, rep, pattern, hammer_count, noise=True
            ).sum())
            ber = total / count
        else:
            mult = module.profile.pattern_multiplier(pattern.key)
            ber = expected_ber(module.profile, temp_c) * mult * _hammer_scale(hammer_count)
        samples.append(BerSample(start, count, int(temp_c), rep, ber))
    return samples


def region_cell_flips(
    module: SimulatedModule,
    region: tuple[int, int],
    temp_c: int,
    rep: int,
    pattern: DataPattern = COLSTRIPE,
    hammer_count: int = HAMMER_COUNT_REF,
    noise: bool = True,
):
    """Cell-accurate region sweep: physical (rows, bits) of every flipped cell.

    Streams the band population chunk by chunk so module-scale sweeps never
    materialize the full cell list.  Edge victim rows cannot be hammered and
    contribute no flips.
    """
    ti = _check_temp_rep(module, temp_c, rep)
    mask = _region_phys_mask(module, region)
    mask[0] = False
    mask[-1] = False
    factor = module.profile.pattern_multiplier(pattern.key) * _hammer_scale(hammer_count)

    out_rows = []
    out_bits = []
    for chunk in range(module.n_chunks()):
        row0, n_rows, bit, lo, hi, prob = module.band_chunk(chunk)
        row_ids = row0 + np.arange(n_rows)
        row_sel = mask[row0 : row0 + n_rows]
        if not np.any(row_sel):
            continue
        covered = row_sel[:, None] & (lo <= temp_c) & (temp_c <= hi)
        rows_flat = np.broadcast_to(row_ids[:, None], bit.shape)[covered]
        bits_flat = bit[covered].astype(np.int64)
        eff = np.minimum(module.band_effective_probs(prob[covered], ti) * factor, 1.0)
        if noise:
            u = coord_uniforms(module.seed, rows_flat, bits_flat, temp_c, rep)
            hit = u < eff
        else:
            hit = eff >= 1.0
        out_rows.append(rows_flat[hit])
        out_bits.append(bits_flat[hit])

    c_rows, c_bits = module.canaries_at(temp_c)
    if c_rows.size:
        sel = mask[c_rows]
        c_rows, c_bits = c_rows[sel], c_bits[sel].astype(np.int64)
        c_eff = min(module.profile.canary_flip_prob * factor, 1.0)
        if noise:
            u = coord_uniforms(module.seed, c_rows, c_bits, temp_c, rep)
            hit = u < c_eff
        else:
            hit = np.full(c_rows.shape, c_eff >= 1.0)
        out_rows.append(c_rows[hit])
        out_bits.append(c_bits[hit])

    rows = np.concatenate(out_rows) if out_rows else np.empty(0, dtype=np.int64)
    bits = np.concatenate(out_bits) if out_bits else np.empty(0, dtype=np.int64)
    order = np.lexsort((bits, rows))
    return rows[order], bits[order]


def select_worst_case_pattern(
    module: SimulatedModule,
    region: tuple[int, int],
    temp_c: int,
    hammer_count: int = HAMMER_COUNT_REF,
    noise: bool = True,
) -> DataPattern:
    """Pick the pattern with the most flips over one sweep of the region.

    Ties (e.g. all sensitivity multipliers equal under noiseless
    measurement) resolve to the earliest pattern in the search order.
    """
    best = None
    best_total = -1.0
    for pattern in ALL_PATTERNS:
        total = float(region_row_counts(
            module, region, temp_c, rep=0, pattern=pattern,
            hammer_count=hammer_count, noise=noise,
        ).sum())
        if total > best_total:
            best, best_total = pattern, total
    return best


# ---------------------------------------------------------------------------
# CSV serialization

BER_CSV_HEADER = ["module_id", "start_row", "row_count", "temp_c", "rep", "flips_per_row"]
FLIP_CSV_HEADER = ["module_id", "row", "bit", "temp_c", "rep"]


def write_ber_csv(path, module_id: int, samples: list[BerSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BER_CSV_HEADER)
        for s in samples:
            w.writerow([module_id, s.start_row, s.row_count, s.temp_c, s.rep,
                        repr(s.flips_per_row)])


def read_ber_csv(path) -> list[tuple[int, BerSample]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        missing = set(BER_CSV_HEADER) - set(r.fieldnames or ())
        if missing:
            raise ConfigError(f"BER CSV missing columns: {sorted(missing)}")
        for row in r:
            out.append((
                int(row["module_id"]),
                BerSample(int(row["start_row"]), int(row["row_count"]),
                          int(row["temp_c"]), int(row["rep"]),
                          float(row["flips_per_row"])),
            ))
    return out


def write_flip_csv(path, module_id: int, records: list[FlipRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FLIP_CSV_HEADER)
        for rec in records:
            w.writerow([module_id, rec.row, rec.bit, rec.temp_c, rec.rep])


# ---------------------------------------------------------------------------
# black-box view used by the attack pipeline

class ModuleHandle:
    """Attacker-facing hammer interface over a simulated module.

    The attack steps observe the module only through this surface: flip
    counts and coordinates in the attacker's own (logical) address space,
    at whatever temperature the environment currently imposes.  The handle
    never exposes the profile, the mapping, or ground-truth cell data.
    """

    def __init__(self, module: SimulatedModule, temp_c: int | None = None,
                 noise: bool = True, hammer_count: int = HAMMER_COUNT_REF,
                 pattern: DataPattern = COLSTRIPE):
        self._module = module
        self.noise = noise
        self.hammer_count = hammer_count
        self.pattern = pattern
        self._temp = int(temp_c) if temp_c is not None else module.profile.temp_domain[0]
        self._truth_cache = lru_cache(maxsize=4)(self._build_cell_truth)

    @property
    def rows(self) -> int:
        return self._module.rows

    @property
    def temperature(self) -> int:
        return self._temp

    def set_temperature(self, temp_c: int) -> None:
        self._module.profile.temp_index(temp_c)   # validate
        self._temp = int(temp_c)

    def set_pattern(self, pattern: DataPattern) -> None:
        self.pattern = pattern

    def single_sided(self, row: int, rep: int):
        """Hammer a logical row; returns ({logical neighbor: flips}, missing sides)."""
        res = hammer_single_sided(
            self._module, row, self._temp, rep,
            pattern=self.pattern, hammer_count=self.hammer_count, noise=self.noise,
        )
        counts = {
            int(self._module.physical_to_logical(q)): c for q, c in res.counts.items()
        }
        return counts, res.missing

    def region_ber(self, region: tuple[int, int], repetitions: int,
                   rep_offset: int = 0, pattern: DataPattern | None = None):
        return measure_region_ber(
            self._module, region, self._temp, repetitions,
            pattern=pattern or self.pattern, hammer_count=self.hammer_count,
            noise=self.noise, rep_offset=rep_offset,
        )

    def region_cell_flips(self, region: tuple[int, int], rep: int):
        """Flipped cells of one cell-accurate region sweep, as logical (row, bit)."""
        rows, bits = region_cell_flips(
            self._module, region, self._temp, rep,
            pattern=self.pattern, hammer_count=self.hammer_count, noise=self.noise,
        )
        return np.asarray(self._module.physical_to_logical(rows)), bits

    def select_worst_case_pattern(self, region: tuple[int, int]) -> DataPattern:
        return select_worst_case_pattern(
            self._module, region, self._temp,
            hammer_count=self.hammer_count, noise=self.noise,
        )

    # -- targeted cell probing (canary monitoring) --------------------------

    def _build_cell_truth(self, coords_blob: bytes):
        coords = np.frombuffer(coords_blob, dtype=np.int64).reshape(-1, 2)
        log_rows, bits = coords[:, 0], coords[:, 1]
        phys = np.asarray(self._module.logical_to_physical(log_rows))
        n = phys.shape[0]
        lo = np.full(n, np.iinfo(np.int16).max, dtype=np.int64)
        hi = np.full(n, np.iinfo(np.int16).min, dtype=np.int64)
        base = np.zeros(n)
        canary_t = np.full(n, -1, dtype=np.int64)

        canary_idx = {
            (int(r), int(b)): int(t)
            for r, b, t in zip(self._module._canary_rows, self._module._canary_bits,
                               self._module._canary_temps)
        }
        by_row: dict[int, list[int]] = {}
        for i in range(n):
            key = (int(phys[i]), int(bits[i]))
            if key in canary_idx:
                canary_t[i] = canary_idx[key]
            else:
                by_row.setdefault(int(phys[i]), []).append(i)
        for row, idxs in by_row.items():
            rbit, rlo, rhi, rprob = self._module.band_cells_of_row(row)
            pos = np.searchsorted(rbit, bits[idxs])
            for k, i in enumerate(idxs):
                j = pos[k]
                if j < rbit.shape[0] and rbit[j] == bits[i]:
                    lo[i], hi[i], base[i] = rlo[j], rhi[j], rprob[j]
        return phys, bits.copy(), lo, hi, base, canary_t

    def probe_cells(self, coords: np.ndarray, rep: int) -> np.ndarray:
        """Hammer the rows holding ``coords`` and report which cells flipped.

        ``coords`` is an (n, 2) array of logical (row, bit).  A hammered
        edge row cannot flip.  Outcomes agree exactly with what a full
        cell-accurate region sweep at the same (temperature, repetition)
        would report for these cells.
        """
        coords = np.ascontiguousarray(np.asarray(coords, dtype=np.int64))
        if coords.size == 0:
            return np.zeros(0, dtype=bool)
        ti = self._module.profile.temp_index(self._temp)
        phys, bits, lo, hi, base, canary_t = self._truth_cache(coords.tobytes())
        factor = (
            self._module.profile.pattern_multiplier(self.pattern.key)
            * _hammer_scale(self.hammer_count)
        )
        t = self._temp
        eff = np.where(
            canary_t == t,
            min(self._module.profile.canary_flip_prob * factor, 1.0),
            np.where(
                (lo <= t) & (t <= hi),
                np.minimum(self._module.band_effective_probs(base, ti) * factor, 1.0),
                0.0,
            ),
        )
        eff[(phys == 0) | (phys == self.rows - 1)] = 0.0
        if not self.noise:
            return eff >= 1.0
        u = coord_uniforms(self._module.seed, phys, bits, t, rep)
        return u < eff
