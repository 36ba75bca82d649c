"""Fit objective: squared error plus penalties on derivatives of the residual.

For a residual ``r = observed - reconstruction`` the loss over a set of grid
points is

    sum_c gamma_c * integral (d^c r / dy^c)^2 dy,   c = 0..3

with integrals taken by the trapezoid rule on the grid and derivatives by
central differences. Every grid point belongs to exactly one region and its
stencils read the full-domain residual, so region losses add up to the
whole-domain loss exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .model import Profile, SpectralLibrary, Spectrum, render_mixture

DEFAULT_GAMMAS = (1.0, 0.1, 0.01, 0.001)
DERIVATIVE_SCHEMES = ("central_difference",)
#: stencil half-width needed by each derivative order
STENCIL_REACH = (0, 1, 1, 2)


@dataclass(frozen=True)
class LossConfig:
    """Weights of the four derivative orders.

    With ``normalize_by_step`` (the default) each ``gamma_c`` is multiplied by
    ``step ** (2 c)``, which turns the derivative terms into penalties on plain
    finite differences and keeps them commensurate with the squared-error term.
    """

    gammas: tuple = DEFAULT_GAMMAS
    derivative_scheme: str = "central_difference"
    normalize_by_step: bool = True

    def __post_init__(self):
        g = tuple(float(x) for x in self.gammas)
        if len(g) != 4 or any(not math.isfinite(x) or x < 0 for x in g):
            raise InvalidArgumentError("gammas must be four finite non-negative weights")
        if g[0] <= 0:
            raise InvalidArgumentError("gamma_0 must be positive")
        if self.derivative_scheme not in DERIVATIVE_SCHEMES:
            raise InvalidArgumentError(f"unknown derivative scheme {self.derivative_scheme!r}")
        object.__setattr__(self, "gammas", g)

    def to_dict(self) -> dict:
        return {"gammas": list(self.gammas), "derivativeScheme": self.derivative_scheme,
                "normalizeByStep": self.normalize_by_step}

    @classmethod
    def from_dict(cls, doc: dict) -> "LossConfig":
        return cls(tuple(doc.get("gammas", DEFAULT_GAMMAS)),
                   doc.get("derivativeScheme", "central_difference"),
                   bool(doc.get("normalizeByStep", True)))


def differences(r: np.ndarray) -> np.ndarray:
    """Undivided central differences of orders 0..3, zero where a stencil leaves the array."""
    n = r.size
    out = np.zeros((4, n))
    out[0] = r
    if n >= 3:
        out[1, 1:-1] = 0.5 * (r[2:] - r[:-2])
        out[2, 1:-1] = r[2:] - 2.0 * r[1:-1] + r[:-2]
    if n >= 5:
        out[3, 2:-2] = 0.5 * (r[4:] - 2.0 * r[3:-1] + 2.0 * r[1:-3] - r[:-4])
    return out


def density_coefficients(spectrum: Spectrum, config: LossConfig) -> np.ndarray:
    """Per-point coefficients ``K[c, i]`` so that the loss density is ``sum_c K[c,i] * D_c r[i]**2``.

    ``D_c`` are the undivided differences of :func:`differences`. Points whose
    stencil touches an excluded point or leaves the domain get zero weight.
    """
    n = len(spectrum)
    h = spectrum.step
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    inc = spectrum.included.astype(float)
    K = np.zeros((4, n))
    for c in range(4):
        reach = STENCIL_REACH[c]
        valid = inc.copy()
        for s in range(1, reach + 1):
            valid[s:] *= inc[:-s]
            valid[:-s] *= inc[s:]
            valid[:s] = 0.0
            valid[n - s:] = 0.0
        scale = 1.0 if config.normalize_by_step else h ** (-2 * c)
        K[c] = config.gammas[c] * scale * w * valid
    return K


def loss_density(observed: Spectrum, recon: Spectrum, config: LossConfig) -> np.ndarray:
    """Loss contribution of every grid point."""
    if not observed.same_grid(recon):
        raise InvalidArgumentError("observed and reconstructed spectra are on different grids")
    r = np.real(observed.intensities) - np.real(recon.intensities)
    r = np.where(observed.included, r, 0.0)
    D = differences(r)
    K = density_coefficients(observed, config)
    return np.einsum("ci,ci->i", K, D * D)


def _index_range(spectrum: Spectrum, region) -> tuple:
    interval = getattr(region, "interval", region)
    lo, hi = interval
    return spectrum.index_range(lo, hi)


def loss_region(observed: Spectrum, recon: Spectrum, region, config: LossConfig = LossConfig()) -> float:
    """Loss restricted to grid points ``y`` with ``lo <= y < hi`` of ``region``."""
    a, b = _index_range(observed, region)
    return float(np.sum(loss_density(observed, recon, config)[a:b]))


def loss_total(observed: Spectrum, profile: Profile, library: SpectralLibrary,
               regions, config: LossConfig = LossConfig()) -> float:
    """Sum of region losses for the full reconstruction of ``profile``."""
    recon = render_mixture(library, profile, observed.real())
    dens = loss_density(observed, recon, config)
    total = 0.0
    for region in regions:
        a, b = _index_range(observed, region)
        total += float(np.sum(dens[a:b]))
    return total


def log_factor_value(loss_value: float, temperature: float) -> float:
    if not (temperature > 0):
        raise InvalidArgumentError("temperature must be positive")
    if loss_value < 0:
        raise InvalidArgumentError("loss must be non-negative")
    return -loss_value / temperature


def factor_value(loss_value: float, temperature: float) -> float:
    """Boltzmann factor ``exp(-loss / T)`` of one region."""
    return math.exp(log_factor_value(loss_value, temperature))
