"""Shot-by-shot Monte Carlo engine.

Each shot draws per-mode intensities, a Poisson electron count per mode with
mean ``prefactor * adk_rate(n_mode, alpha)``, and, for spectra, an ionization
instant per electron from the ADK-weighted time grid of that mode.

Shots are grouped into fixed blocks of :data:`BLOCK_SIZE`; block ``b`` draws
from its own Philox stream keyed by ``(seed, b)``. The block layout depends
only on the shot count, never on the number of workers, so output is
bit-identical for any degree of parallelism.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigValidationError, InvalidInputError, NumericFailureError, SaturationWarning
from .quantum_light import Bsv, Coherent, LightSource, modes_for_target_g2, sample_mode_intensities
from .strong_field import HARTREE_EV, AtomTarget, PulseParams, adk_rate, ionization_times

BLOCK_SIZE = 1 << 14
SATURATION_MEAN = 0.1
# ladder of proposal tables for the instant sampler
_B_LADDER_MIN = 1e-3
_B_LADDER_STEP = 0.02
_MAX_REJECTION_ROUNDS = 10_000

DEFAULT_SCAN_G2 = (1.05, 1.10, 1.15, 1.20, 1.25, 1.30, 1.35, 1.40)


@dataclass(frozen=True)
class Histogram:
    """Uniform-bin histogram with integer counts.

    ``weights`` optionally holds per-bin sums of importance weights; it is
    ``None`` for plain (unweighted) runs.
    """

    edges: np.ndarray
    counts: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        counts = np.asarray(self.counts)
        if counts.size and not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.round(counts)):
                raise InvalidInputError("histogram counts must be integers")
        counts = counts.astype(np.int64)
        if edges.size == 0 and counts.size == 0:
            pass
        elif counts.size != edges.size - 1:
            raise InvalidInputError("len(counts) must equal len(edges) - 1")
        if edges.size > 1 and np.any(np.diff(edges) <= 0):
            raise InvalidInputError("edges must be strictly increasing")
        if np.any(counts < 0):
            raise InvalidInputError("counts must be nonnegative")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "counts", counts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != counts.shape:
                raise InvalidInputError("weights must match counts in shape")
            object.__setattr__(self, "weights", w)

    @classmethod
    def empty(cls) -> "Histogram":
        return cls(np.empty(0), np.empty(0, dtype=np.int64))

    @classmethod
    def uniform(cls, lo: float, hi: float, bins: int) -> "Histogram":
        return cls(np.linspace(lo, hi, bins + 1), np.zeros(bins, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def __eq__(self, other):
        if not isinstance(other, Histogram):
            return NotImplemented
        if (self.weights is None) != (other.weights is None):
            return False
        same = np.array_equal(self.edges, other.edges) and np.array_equal(self.counts, other.counts)
        if self.weights is not None:
            same = same and np.array_equal(self.weights, other.weights)
        return bool(same)

    __hash__ = None


def merge(a: Histogram, b: Histogram) -> Histogram:
    """Bin-wise sum of two histograms on identical edges.

    A histogram without bins acts as the identity.
    """
    if a.edges.size == 0:
        return b
    if b.edges.size == 0:
        return a
    if not np.array_equal(a.edges, b.edges):
        raise InvalidInputError("cannot merge histograms with different edges")
    if (a.weights is None) != (b.weights is None):
        raise InvalidInputError("cannot merge weighted with unweighted histogram")
    weights = None if a.weights is None else a.weights + b.weights
    return Histogram(a.edges, a.counts + b.counts, weights)


@dataclass(frozen=True)
class ShotOutcome:
    electron_count: int
    energies: np.ndarray

    def __post_init__(self):
        if len(self.energies) != self.electron_count:
            raise InvalidInputError("one energy per electron required")


@dataclass(frozen=True)
class SimConfig:
    source: LightSource = field(default_factory=lambda: Bsv(100.0, 5.0))
    pulse: PulseParams = field(default_factory=PulseParams)
    atom: AtomTarget = field(default_factory=AtomTarget)
    shots: int = 100_000
    seed: int = 20251015
    energy_bins: tuple[float, float, int] = (0.0, 20.0, 200)
    time_grid: int = 64
    importance_boost: float = 1.0
    scan_g2: tuple[float, ...] = DEFAULT_SCAN_G2

    def __post_init__(self):
        if not isinstance(self.source, (Coherent, Bsv)):
            raise ConfigValidationError("source", "must be a Coherent or Bsv light source")
        if not (isinstance(self.shots, (int, np.integer)) and self.shots > 0):
            raise ConfigValidationError("shots", "must be a positive integer")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2**64):
            raise ConfigValidationError("seed", "must be an integer in [0, 2**64)")
        lo, hi, nb = self.energy_bins
        if not (isinstance(nb, (int, np.integer)) and nb > 0):
            raise ConfigValidationError("energy_bins", "bin count must be a positive integer")
        if not (0 <= lo < hi and math.isfinite(hi)):
            raise ConfigValidationError("energy_max", "requires energy_max > energy_min >= 0")
        if not (isinstance(self.time_grid, (int, np.integer)) and self.time_grid >= 8):
            raise ConfigValidationError("time_grid", "must be an integer >= 8")
        if not (self.importance_boost >= 1 and math.isfinite(self.importance_boost)):
            raise ConfigValidationError("importance_boost", "must be >= 1")
        object.__setattr__(self, "energy_bins", (float(lo), float(hi), int(nb)))
        object.__setattr__(self, "scan_g2", tuple(float(g) for g in self.scan_g2))

    def with_source(self, source: LightSource) -> "SimConfig":
        return replace(self, source=source)

    @property
    def n_blocks(self) -> int:
        return -(-self.shots // BLOCK_SIZE)

    def block_shots(self, block: int) -> int:
        return min(BLOCK_SIZE, self.shots - block * BLOCK_SIZE)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Independent stream for one block of shots."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _draw_counts(cfg: SimConfig, rng: np.random.Generator, shots: int, boost: float = 1.0):
    n = sample_mode_intensities(cfg.source, rng, shots)
    mu = cfg.atom.prefactor * adk_rate(n, cfg.atom.alpha)
    k = rng.poisson(mu * boost)
    return n, mu, k


def _block_counts(args):
    cfg, block = args
    rng = block_rng(cfg.seed, block)
    boost = cfg.importance_boost
    _, mu, k = _draw_counts(cfg, rng, cfg.block_shots(block), boost)
    per_shot = k.sum(axis=1)
    counts = np.bincount(per_shot)
    if boost == 1.0:
        return counts, None
    # likelihood ratio of Poisson(mu) against Poisson(boost * mu), per shot
    log_w = (boost - 1.0) * mu.sum(axis=1) - per_shot * math.log(boost)
    return counts, np.bincount(per_shot, weights=np.exp(log_w))


def _time_grid(cfg: SimConfig):
    pulse = cfg.pulse
    t = ionization_times(pulse, cfg.time_grid)
    return pulse.omega_fs * t, pulse.envelope(t)


def _energy_of(cfg: SimConfig, n, cols, cep):
    """Kinetic energy (eV) for intensity ``n`` born at grid index ``cols``."""
    pulse = cfg.pulse
    eps2 = pulse.ellipticity**2
    wt, g = _time_grid(cfg)
    e_unit = pulse.peak_field**2 / (2 * pulse.omega**2 * (1 + eps2)) * HARTREE_EV
    # |A|^2 is proportional to g^2 (sin^2 phi + eps^2 cos^2 phi)
    c2 = np.square(np.cos(wt[cols] + cep))
    return n * np.square(g[cols]) * ((1.0 - c2) + eps2 * c2) * e_unit


def _inst_shape(cfg: SimConfig, cols, cep):
    """n_inst / n = g^2 (cos^2 phi + eps^2 sin^2 phi) at grid index ``cols``."""
    eps2 = cfg.pulse.ellipticity**2
    wt, g = _time_grid(cfg)
    c2 = np.square(np.cos(wt[cols] + cep))
    return np.square(g[cols]) * (c2 + eps2 * (1.0 - c2))


def _tunnel_b(alpha: float, n):
    """b in the weight exp(-b / sqrt(n_inst / n)), b = 2 alpha / (3 sqrt(n))."""
    return 2.0 * alpha / (3.0 * np.sqrt(n))


def _sample_instants_table(cfg: SimConfig, n_pairs, k_pairs, cep, rng):
    """Reference sampler: inverse CDF of each pair's full weight table.

    Slow (one table of the whole time grid per pair); kept to cross-check
    :func:`_sample_instants`.
    """
    wt, g = _time_grid(cfg)
    cols = []
    for n, k, phase in zip(n_pairs, k_pairs, cep):
        shape = _inst_shape(cfg, np.arange(wt.size), phase)
        log_w = -_tunnel_b(cfg.atom.alpha, n) / np.sqrt(shape)
        w = np.exp(log_w - log_w.max())
        cdf = np.cumsum(w)
        idx = np.searchsorted(cdf, rng.random(k) * cdf[-1], side="left")
        cols.append(np.minimum(idx, wt.size - 1))
    return np.concatenate(cols) if cols else np.empty(0, dtype=np.intp)


def _ladder_value(rung):
    rung = np.asarray(rung)
    return np.where(rung > 0, _B_LADDER_MIN * (1 + _B_LADDER_STEP) ** (rung - 1.0), 0.0)


def _ladder_rung(b):
    """Highest ladder rung whose value does not exceed ``b`` (rung 0 is b' = 0)."""
    with np.errstate(divide="ignore"):
        rung = np.floor(np.log(b / _B_LADDER_MIN) / math.log1p(_B_LADDER_STEP)) + 1
    rung = np.where(b >= _B_LADDER_MIN, rung, 0).astype(np.int64)
    # undo log rounding in either direction
    rung = np.where(_ladder_value(rung) > b, rung - 1, rung)
    rung = np.where(_ladder_value(rung + 1) <= b, rung + 1, rung)
    return rung


def _sample_instants(cfg: SimConfig, n_pairs, k_pairs, cep, rng):
    """Grid index of the ionization instant of every electron, pair by pair.

    Draws exactly from the discrete table ``w_j = exp(-b / sqrt(s_j))`` of each
    pair, where ``s_j = n_inst / n`` at grid point j and b as in
    :func:`_tunnel_b`, without building that table. Because ``s_j <= g_j^2``
    (g the field envelope), ``exp(-b' / g_j)`` with ``b' <= b`` bounds the
    weight up to a constant. Proposals come from a few such envelope tables on
    a geometric ladder of ``b'`` (rung spacing :data:`_B_LADDER_STEP`, plus a
    uniform rung ``b' = 0``) and are accepted with probability
    ``exp(-b / sqrt(s_j) + b' / g_j + b - b')`` <= 1.
    """
    wt, g = _time_grid(cfg)
    n_t = wt.size
    b = _tunnel_b(cfg.atom.alpha, n_pairs)
    rung = _ladder_rung(b)
    rungs, row_of_pair = np.unique(rung, return_inverse=True)
    b_rung = _ladder_value(rungs)

    inv_g = 1.0 / g
    cdf = np.cumsum(np.exp(-b_rung[:, None] * (inv_g - 1.0)), axis=1)
    cdf /= cdf[:, -1:]
    cdf += np.arange(rungs.size)[:, None]
    flat = cdf.ravel()

    e_pair = np.repeat(np.arange(n_pairs.size), k_pairs)
    cols = np.empty(e_pair.size, dtype=np.int64)
    pending = np.arange(e_pair.size)
    for _ in range(_MAX_REJECTION_ROUNDS):
        if pending.size == 0:
            return cols
        pair = e_pair[pending]
        row = row_of_pair[pair]
        pos = np.searchsorted(flat, row + rng.random(pending.size), side="left")
        j = np.clip(pos - row * n_t, 0, n_t - 1)
        b_prop = b_rung[row]
        shape = _inst_shape(cfg, j, cep[pair])
        log_acc = -b[pair] / np.sqrt(shape) + b_prop * inv_g[j] + b[pair] - b_prop
        accept = np.log(rng.random(pending.size)) < log_acc
        cols[pending[accept]] = j[accept]
        pending = pending[~accept]
    raise NumericFailureError("ionization-instant rejection sampler did not terminate")


def _block_events(cfg: SimConfig, block: int):
    """Per-electron shot index and energy for one block."""
    rng = block_rng(cfg.seed, block)
    shots = cfg.block_shots(block)
    n, _, k = _draw_counts(cfg, rng, shots)
    flat_idx = np.flatnonzero(k)
    n_pairs = n.ravel()[flat_idx]
    k_pairs = k.ravel()[flat_idx]
    cep = rng.uniform(0.0, 2 * math.pi, size=flat_idx.size)
    # k > 0 implies a positive rate, hence a positive intensity, for every pair
    cols = _sample_instants(cfg, n_pairs, k_pairs, cep, rng)
    e_pair = np.repeat(np.arange(flat_idx.size), k_pairs)
    energies = _energy_of(cfg, n_pairs[e_pair], cols, cep[e_pair])
    shot_of_electron = (flat_idx // k.shape[1])[e_pair]
    bound = cfg.pulse.max_streak_energy(float(n.max()))
    if energies.size and energies.max() > bound * (1 + 1e-12):
        raise NumericFailureError(f"streak energy {energies.max()} eV exceeds attainable bound {bound} eV")
    return shot_of_electron, energies, k.sum(axis=1)


def _block_spectrum(args):
    cfg, block = args
    _, energies, _ = _block_events(cfg, block)
    lo, hi, nb = cfg.energy_bins
    counts, _ = np.histogram(energies, bins=np.linspace(lo, hi, nb + 1))
    return counts


def _map_blocks(fn, cfg: SimConfig, workers: int):
    jobs = [(cfg, b) for b in range(cfg.n_blocks)]
    if workers <= 1 or len(jobs) == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _warn_if_saturated(mean: float):
    if mean > SATURATION_MEAN:
        warnings.warn(
            f"mean electron count per shot {mean:.3g} exceeds {SATURATION_MEAN}; "
            "depletion is not modeled",
            SaturationWarning,
            stacklevel=3,
        )


def simulate_counts(cfg: SimConfig, workers: int = 1) -> Histogram:
    """Histogram of electrons per shot, bins ``[k, k+1)`` for k = 0..max.

    With ``importance_boost > 1`` the counts are drawn at the boosted rate and
    ``weights / shots`` estimates the unboosted probability mass function.
    """
    results = _map_blocks(_block_counts, cfg, workers)
    width = max(r[0].size for r in results)
    counts = np.zeros(width, dtype=np.int64)
    weights = None if cfg.importance_boost == 1.0 else np.zeros(width)
    for c, w in results:
        counts[: c.size] += c
        if weights is not None:
            weights[: w.size] += w
    hist = Histogram(np.arange(width + 1, dtype=float), counts, weights)
    k = np.arange(width)
    if weights is None:
        mean = float(k @ counts) / cfg.shots
    else:
        mean = float(k @ weights) / cfg.shots
    _warn_if_saturated(mean)
    return hist


def simulate_spectrum(cfg: SimConfig, workers: int = 1) -> Histogram:
    """Kinetic-energy histogram (eV) of all electrons inside the energy range."""
    results = _map_blocks(_block_spectrum, cfg, workers)
    lo, hi, nb = cfg.energy_bins
    counts = np.zeros(nb, dtype=np.int64)
    for c in results:
        counts += c
    return Histogram(np.linspace(lo, hi, nb + 1), counts)


def simulate_shot(cfg: SimConfig, shot_index: int) -> ShotOutcome:
    """Outcome of a single shot, identical to its contribution in a full run."""
    if not 0 <= shot_index < cfg.shots:
        raise InvalidInputError("shot_index out of range")
    block, offset = divmod(shot_index, BLOCK_SIZE)
    shot_ids, energies, per_shot = _block_events(cfg, block)
    mine = energies[shot_ids == offset]
    return ShotOutcome(int(per_shot[offset]), mine)


def scan_configs(cfg: SimConfig, g2_values: Sequence[float]) -> list[SimConfig]:
    """Configs for a g2 scan at the fixed total mean photon number of ``cfg``."""
    if not isinstance(cfg.source, Bsv):
        raise InvalidInputError("g2 scan requires a BSV source")
    nbar = cfg.source.nbar
    modes = [modes_for_target_g2(g2, nbar) for g2 in g2_values]
    return [cfg.with_source(Bsv(nbar, m)) for m in modes]


def g2_scan(cfg: SimConfig, g2_values: Sequence[float], workers: int = 1) -> list[tuple[float, Histogram]]:
    """Spectra at each requested g2, holding the total mean photon number fixed."""
    configs = scan_configs(cfg, g2_values)
    return [(float(g2), simulate_spectrum(c, workers)) for g2, c in zip(g2_values, configs)]
