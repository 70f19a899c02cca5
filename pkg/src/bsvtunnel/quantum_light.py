"""Photon-number statistics of coherent light and multi-mode bright squeezed vacuum.

Intensities are continuous and measured in mean photons per shot. A BSV source
with total mean ``nbar`` spread over ``N`` equally squeezed modes has total
intensity distributed as a gamma law with shape ``N/2`` and scale
``2 nbar / N``; each individual mode contributes shape ``1/2`` with the same
scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import InvalidInputError, UnattainableStatisticsError

# relative distance below which a mode count is treated as an integer
MODE_SNAP_RTOL = 1e-9
# excess g2 below this is roundoff, not a finite mode count
G2_EXCESS_ATOL = 1e-12


@dataclass(frozen=True)
class SqueezedModeSet:
    """Independent single-mode squeezers applied to vacuum.

    ``phases`` are kept for completeness; photon-number moments do not depend
    on them.
    """

    squeeze_params: tuple[float, ...]
    phases: tuple[float, ...] = field(default=())

    def __post_init__(self):
        r = tuple(float(x) for x in self.squeeze_params)
        if not r:
            raise InvalidInputError("squeeze_params must be non-empty")
        if any(not math.isfinite(x) or x < 0 for x in r):
            raise InvalidInputError("squeeze_params must be finite and >= 0")
        phases = tuple(float(x) for x in self.phases) or (0.0,) * len(r)
        if len(phases) != len(r):
            raise InvalidInputError("phases must match squeeze_params in length")
        object.__setattr__(self, "squeeze_params", r)
        object.__setattr__(self, "phases", phases)

    @classmethod
    def equal(cls, r: float, modes: int) -> "SqueezedModeSet":
        return cls((r,) * modes)


@dataclass(frozen=True)
class Coherent:
    intensity: float

    def __post_init__(self):
        if not (self.intensity > 0 and math.isfinite(self.intensity)):
            raise InvalidInputError("coherent intensity must be > 0")


@dataclass(frozen=True)
class Bsv:
    nbar: float
    modes: float

    def __post_init__(self):
        if not (self.nbar > 0 and math.isfinite(self.nbar)):
            raise InvalidInputError("nbar must be > 0")
        if not (self.modes > 0 and math.isfinite(self.modes)):
            raise InvalidInputError("modes must be > 0")

    @property
    def per_mode_mean(self) -> float:
        return per_mode_mean(self.nbar, self.modes)


LightSource = Union[Coherent, Bsv]


@dataclass(frozen=True)
class MomentPair:
    mean: float
    second_moment: float


def squeezed_mode_moments(modes: SqueezedModeSet) -> MomentPair:
    """First and second moments of the total photon number."""
    if not isinstance(modes, SqueezedModeSet):
        modes = SqueezedModeSet(tuple(modes))
    s2 = [math.sinh(r) ** 2 for r in modes.squeeze_params]
    mean = math.fsum(s2)
    second = math.fsum(2 * x * x + 2 * x for x in s2) + mean * mean
    return MomentPair(mean, second)


def g2_from_moments(m: MomentPair) -> float:
    """Normally ordered zero-delay correlation <n(n-1)>/<n>^2."""
    if not m.mean > 0:
        raise InvalidInputError("g2 undefined for non-positive mean")
    return (m.second_moment - m.mean) / m.mean**2


def _require_positive(**kw):
    for name, value in kw.items():
        if not (value > 0 and math.isfinite(value)):
            raise InvalidInputError(f"{name} must be > 0, got {value!r}")


def g2_equal_modes(nbar: float, modes: float) -> float:
    _require_positive(nbar=nbar, modes=modes)
    return 1.0 + 2.0 / modes + 1.0 / nbar


def per_mode_mean(nbar: float, modes: float) -> float:
    _require_positive(nbar=nbar, modes=modes)
    return nbar / modes


def g2_from_per_mode(nk: float, nbar: float, exact: bool = True) -> float:
    """g2 written in terms of the per-mode mean ``nk`` and total mean ``nbar``.

    ``exact=False`` drops the shot-noise ``1/nbar`` term (bright limit).
    """
    _require_positive(nk=nk, nbar=nbar)
    if nk > nbar:
        raise InvalidInputError(f"per-mode mean {nk} exceeds total mean {nbar}")
    if exact:
        return 1.0 + (2.0 * nk + 1.0) / nbar
    return 1.0 + 2.0 * nk / nbar


def modes_for_target_g2(g2: float, nbar: float) -> float:
    """Effective (real) mode count that produces ``g2`` at total mean ``nbar``."""
    _require_positive(nbar=nbar)
    excess = g2 - 1.0 - 1.0 / nbar
    if not excess > G2_EXCESS_ATOL:
        raise UnattainableStatisticsError(
            f"g2={g2!r} is unattainable for BSV with nbar={nbar!r} "
            f"(requires g2 > {1.0 + 1.0 / nbar!r})"
        )
    return 2.0 / excess


def bsv_intensity_density(n, nbar: float, modes: float):
    """Probability density of the total intensity of ``modes``-mode BSV.

    Gamma density with shape ``modes/2`` and scale ``2 nbar / modes``.
    Accepts scalars or arrays for ``n``.
    """
    _require_positive(nbar=nbar, modes=modes)
    n_arr = np.asarray(n, dtype=float)
    if np.any(n_arr < 0) or np.any(np.isnan(n_arr)):
        raise InvalidInputError("photon number must be >= 0")
    k = modes / 2.0
    rate = modes / (2.0 * nbar)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = (k - 1.0) * np.log(n_arr) + k * math.log(rate) - rate * n_arr - math.lgamma(k)
        out = np.exp(logp)
    # the origin is 0, 1/nbar-like, or divergent depending on the shape
    at_zero = n_arr == 0
    if np.any(at_zero):
        if k > 1:
            zero_val = 0.0
        elif k == 1:
            zero_val = rate
        else:
            zero_val = math.inf
        out = np.where(at_zero, zero_val, out)
    return float(out) if np.ndim(out) == 0 else out


def mode_shapes(modes: float) -> np.ndarray:
    """Gamma shapes of the independent mode draws making up ``modes`` modes.

    Integer counts give ``modes`` entries of 1/2. A non-integer count gets
    ``floor(modes)`` full modes plus one partial mode of shape ``frac/2``, so
    the shapes always sum to ``modes/2``.
    """
    _require_positive(modes=modes)
    nearest = round(modes)
    if nearest >= 1 and abs(modes - nearest) <= MODE_SNAP_RTOL * max(1.0, modes):
        return np.full(int(nearest), 0.5)
    whole = int(math.floor(modes))
    frac = modes - whole
    return np.concatenate([np.full(whole, 0.5), [frac / 2.0]])


def sample_mode_intensities(source: LightSource, rng: np.random.Generator, shots: int) -> np.ndarray:
    """Per-mode intensities for ``shots`` shots, shape ``(shots, n_modes)``."""
    if isinstance(source, Coherent):
        return np.full((shots, 1), float(source.intensity))
    if isinstance(source, Bsv):
        shapes = mode_shapes(source.modes)
        scale = 2.0 * source.nbar / source.modes
        return rng.gamma(shapes, scale, size=(shots, shapes.size))
    raise InvalidInputError(f"unknown light source {source!r}")


def sample_intensities(source: LightSource, shot_rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """One shot: per-mode intensities and their total."""
    per_mode = sample_mode_intensities(source, shot_rng, 1)[0]
    return per_mode, float(per_mode.sum())
