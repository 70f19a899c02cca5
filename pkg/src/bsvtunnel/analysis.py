"""Peak extraction, intensity calibration, fits, count statistics and oracles.

The oracles here are deterministic quadratures. They share the physical
model with :mod:`bsvtunnel.montecarlo` but none of its sampling code, so
agreement between the two is a genuine cross-check.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, stats

from .errors import (
    DegenerateFitError,
    InvalidInputError,
    NoPeakError,
    NumericFailureError,
    OutOfRangeError,
    UndefinedStatisticError,
)
from .montecarlo import Histogram
from .quantum_light import Bsv, Coherent, LightSource, mode_shapes
from .strong_field import HARTREE_EV, AtomTarget, PulseParams, adk_rate, ionization_times

QUAD_EPSABS = 1e-10


@dataclass(frozen=True)
class ScanPoint:
    g2: float
    peak_energy: float
    i_eff: float


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float

    @property
    def root(self) -> float:
        """x where the fitted line crosses zero."""
        if self.slope == 0:
            raise DegenerateFitError("flat line has no root")
        return -self.intercept / self.slope


@dataclass(frozen=True)
class ScanResult:
    nbar: float
    points: tuple[ScanPoint, ...]
    fit: LinearFit | None


# --------------------------------------------------------------------------
# peaks and calibration


def find_peak(hist: Histogram, smooth_window: int = 5) -> float:
    """Energy at the spectral maximum.

    The counts are smoothed with a centered moving average to locate the
    peak region; the result is the center of the largest raw bin inside the
    smoothing window around the smoothed maximum. Ties go to lower energy.
    """
    if smooth_window < 1 or smooth_window % 2 == 0:
        raise InvalidInputError("smooth_window must be an odd integer >= 1")
    if hist.counts.size == 0 or hist.total == 0:
        raise NoPeakError("histogram is empty")
    counts = hist.counts.astype(float)
    smoothed = np.convolve(counts, np.ones(smooth_window), mode="same")
    i = int(np.argmax(smoothed))
    half = smooth_window // 2
    lo, hi = max(0, i - half), min(counts.size, i + half + 1)
    j = lo + int(np.argmax(counts[lo:hi]))
    return float(hist.centers[j])


def noiseless_spectrum(scale: float, pulse: PulseParams, alpha: float, edges,
                       points_per_cycle: int = 64, n_cep: int | None = None) -> np.ndarray:
    """Expected energy distribution of one electron at fixed intensity ``scale``.

    Averages the normalized ADK time weights over a uniform grid of
    carrier-envelope phases and bins the resulting energies on ``edges``.
    Returns per-bin probabilities.
    """
    edges = np.asarray(edges, dtype=float)
    if scale <= 0:
        return np.zeros(edges.size - 1)
    t = ionization_times(pulse, points_per_cycle)
    if n_cep is None:
        n_cep = 1 if pulse.ellipticity == 1 else 32
    cep = 2 * math.pi * np.arange(n_cep) / n_cep
    phi = pulse.omega_fs * t[None, :] + cep[:, None]
    eps2 = pulse.ellipticity**2
    g2 = np.square(pulse.envelope(t))
    cos2 = np.cos(phi) ** 2
    n_inst = scale * g2 * (cos2 + eps2 * (1 - cos2))
    with np.errstate(divide="ignore"):
        log_w = np.where(n_inst > 0, -2 * alpha / (3 * np.sqrt(n_inst)), -np.inf)
    w = np.exp(log_w - log_w.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True) * n_cep
    energy = (scale * pulse.peak_field**2 * g2 / (2 * pulse.omega**2 * (1 + eps2))
              * ((1 - cos2) + eps2 * cos2) * HARTREE_EV)
    hist, _ = np.histogram(energy.ravel(), bins=edges, weights=w.ravel())
    return hist


def noiseless_peak(scale: float, pulse: PulseParams, alpha: float,
                   points_per_cycle: int = 64, bins: int = 2000) -> float:
    """Most probable energy (eV) at fixed intensity, on a fine private grid."""
    top = pulse.max_streak_energy(scale) * 1.001
    edges = np.linspace(0.0, top, bins + 1)
    p = noiseless_spectrum(scale, pulse, alpha, edges, points_per_cycle)
    i = int(np.argmax(p))
    return 0.5 * (edges[i] + edges[i + 1])


@functools.lru_cache(maxsize=32)
def _peak_lookup(pulse: PulseParams, alpha: float, points_per_cycle: int,
                 s_min: float, s_max: float, n_points: int):
    scales = np.geomspace(s_min, s_max, n_points)
    peaks = np.array([noiseless_peak(s, pulse, alpha, points_per_cycle) for s in scales])
    # fine-grid quantization can produce tiny non-monotone wiggles
    peaks = np.maximum.accumulate(peaks)
    return scales, peaks


def peak_to_intensity(peak_energy: float, pulse: PulseParams, alpha: float | None = None,
                      points_per_cycle: int = 64, scale_range=(1e-2, 1e4)) -> float:
    """Intensity scale whose noiseless spectrum peaks at ``peak_energy`` (eV).

    Circular polarization inverts the closed form ``E = s E0^2 / (4 w^2)``.
    Elliptical polarization needs ``alpha`` and inverts a monotone lookup of
    noiseless peaks over ``scale_range``.
    """
    if peak_energy < 0:
        raise InvalidInputError("peak energy must be >= 0")
    if peak_energy == 0:
        return 0.0
    if pulse.ellipticity == 1:
        return 4 * pulse.omega**2 * (peak_energy / HARTREE_EV) / pulse.peak_field**2
    if alpha is None:
        raise InvalidInputError("alpha is required to calibrate elliptical pulses")
    scales, peaks = _peak_lookup(pulse, float(alpha), points_per_cycle,
                                 float(scale_range[0]), float(scale_range[1]), 241)
    if peak_energy > peaks[-1]:
        raise OutOfRangeError(f"peak energy {peak_energy} eV above lookup range (max {peaks[-1]:.6g} eV)")
    if peak_energy < peaks[0]:
        # below the table the peak is proportional to scale to good accuracy
        return float(scales[0] * peak_energy / peaks[0])
    # interpolate in log-log where the relation is close to linear
    return float(np.exp(np.interp(math.log(peak_energy), np.log(peaks), np.log(scales))))


def fit_linear(points: Iterable[Sequence[float]]) -> LinearFit:
    """Ordinary least squares y = slope * x + intercept."""
    arr = np.asarray(list(points), dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise DegenerateFitError("need at least two (x, y) points")
    x, y = arr[:, 0], arr[:, 1]
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise DegenerateFitError("all x values are equal")
    slope = float(dx @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    dy = y - y.mean()
    ss_tot = float(dy @ dy)
    if ss_tot == 0:
        r2 = 1.0 if ss_res == 0 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return LinearFit(slope, intercept, r2)


def analyze_scan(results: Sequence[tuple[float, Histogram]], nbar: float, pulse: PulseParams,
                 alpha: float | None = None, smooth_window: int = 5) -> ScanResult:
    """Peak energy, effective intensity and linear fit for a g2 scan."""
    points = []
    for g2, hist in results:
        peak = find_peak(hist, smooth_window)
        points.append(ScanPoint(g2, peak, peak_to_intensity(peak, pulse, alpha)))
    fit = fit_linear([(p.g2, p.i_eff) for p in points]) if len({p.g2 for p in points}) >= 2 else None
    return ScanResult(nbar, tuple(points), fit)


# --------------------------------------------------------------------------
# count statistics


def _count_frequencies(counts):
    if isinstance(counts, Histogram):
        k = counts.edges[:-1]
        f = counts.weights if counts.weights is not None else counts.counts.astype(float)
        return k, f
    arr = np.asarray(counts)
    if arr.size == 0:
        raise UndefinedStatisticError("no samples")
    if np.any(arr < 0):
        raise InvalidInputError("counts must be nonnegative")
    f = np.bincount(arr.astype(np.int64))
    return np.arange(f.size, dtype=float), f.astype(float)


def sample_g2(counts) -> float:
    """Normally ordered second-order correlation <k(k-1)>/<k>^2 of counts.

    Accepts a sequence of integer counts or a counts :class:`Histogram`.
    """
    k, f = _count_frequencies(counts)
    n = f.sum()
    m1 = float(k @ f) / n
    if not m1 > 0:
        raise UndefinedStatisticError("g2 undefined for all-zero counts")
    m2 = float((k * k) @ f) / n
    return (m2 - m1) / m1**2


def fano_factor(counts) -> float:
    """Unbiased sample variance over sample mean."""
    k, f = _count_frequencies(counts)
    n = f.sum()
    m1 = float(k @ f) / n
    if not m1 > 0:
        raise UndefinedStatisticError("Fano factor undefined for all-zero counts")
    if n < 2:
        raise UndefinedStatisticError("need at least two samples")
    var = float(((k - m1) ** 2) @ f) / (n - 1)
    return var / m1


def bootstrap(hist: Histogram, statistic, n_boot: int = 200, seed: int = 0) -> np.ndarray:
    """Bootstrap replicates of ``statistic`` over the shots of a counts histogram.

    Resamples shots by drawing multinomial bin counts, which is equivalent to
    resampling the underlying per-shot counts with replacement.
    """
    rng = np.random.default_rng(seed)
    p = hist.counts / hist.total
    reps = np.empty(n_boot)
    for b in range(n_boot):
        resampled = rng.multinomial(hist.total, p)
        reps[b] = statistic(Histogram(hist.edges, resampled))
    return reps


# --------------------------------------------------------------------------
# quadrature oracles


def _gamma_expectation(h, shape: float, scale: float, what: str = "") -> float:
    """E[h(n)] for n ~ Gamma(shape, scale), by adaptive Gauss-Kronrod quadrature.

    Shapes below one are integrated in w with n = scale * w**(1/shape), which
    maps the density to exp(-w**(1/shape)) / Gamma(shape + 1) and removes the
    singularity at the origin.
    """
    if shape < 1:
        inv = 1.0 / shape
        norm = math.exp(-math.lgamma(shape + 1))
        upper = 60.0**shape

        def f(w):
            x = w**inv
            return norm * math.exp(-x) * h(scale * x)
    else:
        lg = math.lgamma(shape)
        upper = shape + 40 * math.sqrt(shape) + 60

        def f(x):
            if x == 0:
                return 0.0 if shape > 1 else h(0.0)
            return math.exp((shape - 1) * math.log(x) - x - lg) * h(scale * x)

    grid = np.linspace(0.0, upper, 801)[1:]
    vals = np.array([f(x) for x in grid])
    if not np.all(np.isfinite(vals)):
        raise NumericFailureError(f"non-finite integrand for {what or 'expectation'}: shape={shape}, scale={scale}")
    if not np.any(vals > 0):
        return 0.0
    peak = float(grid[int(np.argmax(vals))])
    breaks = sorted({peak * r for r in (0.5, 1.0, 2.0) if 0 < peak * r < upper})
    value, abserr, info = integrate.quad(f, 0.0, upper, points=breaks or None, limit=400,
                                         epsabs=QUAD_EPSABS, epsrel=1e-10, full_output=1)[:3]
    if abserr > 1e-8 or not math.isfinite(value):
        raise NumericFailureError(
            f"quadrature did not converge for {what or 'expectation'}: shape={shape}, "
            f"scale={scale}, value={value}, abserr={abserr}, evaluations={info['neval']}"
        )
    return value


def _mode_components(source: LightSource, per_mode: bool):
    """(shape, scale, multiplicity) triples of independent intensity draws."""
    if isinstance(source, Coherent):
        return []
    scale = 2.0 * source.nbar / source.modes
    if not per_mode:
        return [(source.modes / 2.0, scale, 1)]
    shapes = mode_shapes(source.modes)
    comps = [(0.5, scale, int(np.sum(shapes == 0.5)))]
    rest = shapes[shapes != 0.5]
    if rest.size:
        comps.append((float(rest[0]), scale, 1))
    return [c for c in comps if c[2] > 0]


def oracle_mean_count(source: LightSource, atom: AtomTarget, per_mode: bool = True) -> float:
    """Expected electrons per shot, c * sum over modes of E[adk_rate(n)]."""
    c, alpha = atom.prefactor, atom.alpha
    if isinstance(source, Coherent):
        return c * adk_rate(source.intensity, alpha)
    total = 0.0
    for shape, scale, mult in _mode_components(source, per_mode):
        total += mult * _gamma_expectation(lambda n: adk_rate(n, alpha), shape, scale, "mean count")
    return c * total


def _mixture_pmf(shape, scale, atom, k_max):
    c, alpha = atom.prefactor, atom.alpha

    def pois(k):
        def h(n):
            mu = c * adk_rate(n, alpha)
            if mu == 0:
                return 1.0 if k == 0 else 0.0
            return math.exp(k * math.log(mu) - mu - math.lgamma(k + 1))
        return h

    return np.array([_gamma_expectation(pois(k), shape, scale, f"P(k={k})") for k in range(k_max + 1)])


def count_pmf_oracle(source: LightSource, atom: AtomTarget, k_max: int | None = None,
                     per_mode: bool = True) -> np.ndarray:
    """Probability of k = 0..k_max electrons per shot.

    With ``per_mode=True`` (the engine's model) each BSV mode is an
    independent Poisson-gamma mixture and the shot count is their
    convolution. ``per_mode=False`` mixes a single Poisson over the total
    intensity law instead. ``k_max=None`` grows the support until the
    neglected tail is below 1e-10.
    """
    if k_max is not None and k_max < 1:
        raise InvalidInputError("k_max must be >= 1")
    if isinstance(source, Coherent):
        mu = atom.prefactor * adk_rate(source.intensity, atom.alpha)
        if k_max is None:
            k_max = max(1, int(stats.poisson.isf(1e-12, mu)) + 1)
        return stats.poisson.pmf(np.arange(k_max + 1), mu)

    if k_max is not None:
        return _convolved_pmf(source, atom, k_max, per_mode)
    mean = oracle_mean_count(source, atom, per_mode)
    k_max = max(4, int(math.ceil(mean + 10 * math.sqrt(mean) + 10)))
    while True:
        pmf = _convolved_pmf(source, atom, k_max, per_mode)
        if 1.0 - pmf.sum() < 1e-10 or k_max >= 4096:
            return pmf
        k_max *= 2


def _convolved_pmf(source, atom, k_max, per_mode):
    out = np.zeros(k_max + 1)
    out[0] = 1.0
    for shape, scale, mult in _mode_components(source, per_mode):
        single = _mixture_pmf(shape, scale, atom, k_max)
        for _ in range(mult):
            out = np.convolve(out, single)[: k_max + 1]
    return out


def calibrate_prefactor(source: LightSource, atom: AtomTarget, target_mean: float) -> AtomTarget:
    """Copy of ``atom`` whose prefactor gives ``target_mean`` electrons per shot."""
    if not target_mean > 0:
        raise InvalidInputError("target mean must be > 0")
    unit = AtomTarget(atom.ip, atom.alpha, 1.0)
    per_unit = oracle_mean_count(source, unit)
    if per_unit <= 0:
        raise NumericFailureError("source produces no ionization; cannot calibrate")
    return AtomTarget(atom.ip, atom.alpha, target_mean / per_unit)


def _kernel_cdf(scale, pulse, alpha, points_per_cycle, u_edges):
    """CDF over u = E / E_max(scale) of the fixed-intensity spectrum."""
    e_edges = u_edges * pulse.max_streak_energy(scale)
    p = noiseless_spectrum(scale, pulse, alpha, e_edges, points_per_cycle)
    return np.concatenate([[0.0], np.cumsum(p)])


def expected_spectrum(source: LightSource, atom: AtomTarget, pulse: PulseParams, edges,
                      points_per_cycle: int = 64, n_fine: int = 40000,
                      n_kernels: int = 96) -> np.ndarray:
    """Expected fraction of all emitted electrons falling in each energy bin.

    For BSV the fixed-intensity spectrum is mixed over ``density(n) * mu(n)``
    of every mode on a uniform intensity grid of ``n_fine`` points. The
    fixed-intensity spectrum depends on ``n`` only through a scale factor and
    the slowly varying ``alpha / sqrt(n)``, so its CDF in ``E / E_max`` is
    tabulated on ``n_kernels`` log-spaced intensities and reused for the
    nearest grid points.
    """
    edges = np.asarray(edges, dtype=float)
    alpha = atom.alpha
    if isinstance(source, Coherent):
        p = noiseless_spectrum(source.intensity, pulse, alpha, edges, points_per_cycle)
        return p
    u_edges = np.linspace(0.0, 1.0, 4001)
    acc = np.zeros(edges.size - 1)
    norm = 0.0
    for shape, scale, mult in _mode_components(source, per_mode=True):
        n_hi = scale * (shape + 12 * math.sqrt(shape) + 40)
        dn = n_hi / n_fine
        n = (np.arange(n_fine) + 0.5) * dn
        log_p = (shape - 1) * np.log(n) - n / scale - math.lgamma(shape) - shape * math.log(scale)
        mass = mult * dn * np.exp(log_p) * adk_rate(n, alpha)
        live = mass > mass.max() * 1e-16
        n, mass = n[live], mass[live]
        norm += mass.sum()
        kernel_n = np.geomspace(n[0], n[-1], n_kernels)
        cdfs = np.array([_kernel_cdf(k, pulse, alpha, points_per_cycle, u_edges) for k in kernel_n])
        nearest = np.clip(np.rint(np.log(n / n[0]) / np.log(kernel_n[1] / kernel_n[0])).astype(int),
                          0, n_kernels - 1)
        e_max = np.array([pulse.max_streak_energy(x) for x in n])
        for j in np.unique(nearest):
            sel = nearest == j
            u = np.clip(edges[None, :] / e_max[sel, None], 0.0, 1.0)
            cdf = np.interp(u, u_edges, cdfs[j])
            acc += mass[sel] @ np.diff(cdf, axis=1)
    return acc / norm if norm > 0 else acc


def coherent_equivalent_intensity(yield_per_prefactor: float, alpha: float) -> float:
    """Coherent intensity whose relative ADK rate equals the given yield.

    Returns ``inf`` when the yield is at or above the saturated rate 1.
    """
    if yield_per_prefactor <= 0:
        return 0.0
    if yield_per_prefactor >= 1:
        return math.inf
    if alpha == 0:
        return 0.0
    return (2 * alpha / (3 * -math.log(yield_per_prefactor))) ** 2


def coherent_equivalent_ratio(mean_count: float, source: Bsv, atom: AtomTarget) -> float:
    """Coherent power matching the BSV ionization yield, over the BSV power."""
    return coherent_equivalent_intensity(mean_count / atom.prefactor, atom.alpha) / source.nbar
