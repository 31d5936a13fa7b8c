"""Uncertainties, nonclassicality and model fits for reconstructed statistics.

Per-element uncertainties come from the residual of the final iterate::

    delta_rho_n = mean_nu |p_nu - f_nu| / A_nun

Rows with ``A_nun`` below :data:`RESPONSE_FLOOR` are left out of the mean for
that ``n`` and reported in ``excluded_pairs``; an index with no retained row
has an undefined uncertainty (``nan``).

Klyshko errors use first-order propagation with the ``delta_rho`` treated as
independent. Model fits minimize ``sum_n (rho_n - model_n)^2 / delta_rho_n^2``
over the indices with a defined uncertainty.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .distributions import (
    ModelSpec,
    PhotonDistribution,
    TruncationWarning,
    mean_photon_number,
)
from .em import ReconstructionResult
from .errors import (
    DomainError,
    IllPosedFitError,
    ShapeError,
    UndefinedUncertaintyError,
    UndefinedValueError,
)
from .forward import OnOffDataset, response_matrix

RESPONSE_FLOOR = 1e-6
FIT_FAMILIES = ("fock", "coherent", "thermal", "multithermal")
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class UncertaintyReport:
    """Per-index uncertainties with the bookkeeping of dropped rows.

    Attributes:
        delta_rho: one value per Fock index; ``nan`` where undefined.
        excluded_terms: per index, number of efficiency rows dropped by the floor.
        excluded_pairs: every dropped ``(nu, n)`` pair.
    """

    delta_rho: np.ndarray
    excluded_terms: np.ndarray
    excluded_pairs: list = field(default_factory=list)

    @property
    def undefined_indices(self) -> list[int]:
        return [int(n) for n in np.flatnonzero(np.isnan(self.delta_rho))]

    def at(self, n: int) -> float:
        value = self.delta_rho[n]
        if math.isnan(value):
            raise UndefinedUncertaintyError(f"every efficiency row was excluded for n={n}")
        return float(value)

    def to_dict(self) -> dict:
        return {
            "delta_rho": [None if math.isnan(v) else float(v) for v in self.delta_rho],
            "excluded_terms": [int(c) for c in self.excluded_terms],
            "excluded_pairs": [[int(v), int(n)] for v, n in self.excluded_pairs],
        }


@dataclass(frozen=True)
class FitSummary:
    model: ModelSpec
    fitted_parameters: dict
    chi_square: float
    reduced_chi_square: float
    degrees_of_freedom: int

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "fitted_parameters": dict(self.fitted_parameters),
            "chi_square": float(self.chi_square),
            "reduced_chi_square": float(self.reduced_chi_square),
            "degrees_of_freedom": int(self.degrees_of_freedom),
        }


@dataclass(frozen=True)
class ParameterGrid:
    """Search specification for the fits.

    ``mu_bounds`` and ``background_mu_bounds`` default to ``(0, max(1, 3 * mean + 1))``
    with ``mean`` the mean photon number of the reconstruction.
    """

    modes: tuple = (1,)
    mu_bounds: tuple | None = None
    weights: tuple = tuple(np.round(np.linspace(0.0, 1.0, 21), 12))
    background_mu_bounds: tuple | None = None

    def __post_init__(self):
        if not self.modes:
            raise DomainError("mode list must not be empty")
        for m in self.modes:
            if isinstance(m, bool) or int(m) != m or m < 1:
                raise DomainError(f"mode counts must be integers >= 1, got {m!r}")
        if not self.weights or min(self.weights) < 0 or max(self.weights) > 1:
            raise DomainError("background weights must lie in [0, 1]")
        for bounds in (self.mu_bounds, self.background_mu_bounds):
            if bounds is not None and not 0 <= bounds[0] <= bounds[1]:
                raise DomainError(f"invalid bounds {bounds!r}")


def _probs(x):
    return x.probs if isinstance(x, PhotonDistribution) else np.asarray(x, dtype=float)


def residual_uncertainty(residuals, A, floor: float = RESPONSE_FLOOR) -> UncertaintyReport:
    """Average ``|residual_nu| / A_nun`` over rows with ``A_nun >= floor``.

    Args:
        residuals: ``p_nu - f_nu`` per efficiency row.
        A: response entries, shape ``(K, N+1)``.
    """
    A = np.asarray(getattr(A, "entries", A), dtype=float)
    r = np.abs(np.asarray(residuals, dtype=float))
    if A.ndim != 2 or A.shape[0] != r.size:
        raise ShapeError(f"residuals of length {r.size} do not match matrix {A.shape}")
    keep = A >= floor
    counts = keep.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(keep, r[:, None] / np.where(keep, A, 1.0), 0.0)
        delta = terms.sum(axis=0) / counts
    delta = np.where(counts > 0, delta, np.nan)
    excluded = [(int(v), int(n)) for v, n in zip(*np.nonzero(~keep))]
    return UncertaintyReport(delta, (~keep).sum(axis=0), excluded)


def confidence_intervals(result: ReconstructionResult, data: OnOffDataset,
                         floor: float = RESPONSE_FLOOR) -> UncertaintyReport:
    """Uncertainty of each reconstructed element from the final residuals."""
    if result.etas is not None and not np.array_equal(result.etas, data.grid.etas):
        raise ShapeError("reconstruction and dataset use different efficiency grids")
    R = response_matrix(data.grid, result.rho.truncation)
    residuals = R.entries @ result.rho.probs - data.frequencies
    return residual_uncertainty(residuals, R.entries, floor)


def klyshko(p, n: int) -> float:
    """``(n+1) p_{n-1} p_{n+1} / (n p_n^2)``; values below 1 witness nonclassical light."""
    probs = _probs(p)
    N = probs.size - 1
    if int(n) != n or not 1 <= n <= N - 1:
        raise DomainError(f"Klyshko index must satisfy 1 <= n <= {N - 1}, got {n!r}")
    n = int(n)
    if probs[n] == 0:
        raise UndefinedValueError(f"p_{n} = 0, Klyshko parameter undefined")
    return (n + 1) * probs[n - 1] * probs[n + 1] / (n * probs[n] ** 2)


def klyshko_with_uncertainty(p, delta: UncertaintyReport, n: int) -> tuple[float, float]:
    """Klyshko parameter and its propagated uncertainty.

    ``dK/K = sqrt((d_{n-1}/p_{n-1})^2 + (d_{n+1}/p_{n+1})^2 + 4 (d_n/p_n)^2)``.
    """
    value = klyshko(p, n)
    probs = _probs(p)
    n = int(n)
    rel = 0.0
    for k, factor in ((n - 1, 1.0), (n + 1, 1.0), (n, 4.0)):
        if probs[k] == 0:
            raise UndefinedValueError(f"p_{k} = 0, relative uncertainty undefined")
        rel += factor * (delta.at(k) / probs[k]) ** 2
    return value, abs(value) * math.sqrt(rel)


def _golden_min(fun, lo, hi, tol=1e-10, coarse=40):
    """Coarse scan followed by golden-section refinement on ``[lo, hi]``."""
    if hi <= lo:
        return lo, fun(lo)
    xs = np.linspace(lo, hi, coarse + 1)
    fs = [fun(x) for x in xs]
    k = int(np.argmin(fs))
    a = xs[max(k - 1, 0)]
    b = xs[min(k + 1, coarse)]
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol * max(1.0, abs(a) + abs(b)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fun(d)
    x, fx = (c, fc) if fc <= fd else (d, fd)
    if fs[k] < fx:
        return xs[k], fs[k]
    return x, fx


class _Objective:
    """Chi-square against the reconstruction on the indices with defined uncertainty."""

    def __init__(self, rho, delta: UncertaintyReport):
        self.rho = _probs(rho)
        d = np.asarray(delta.delta_rho, dtype=float)
        if d.shape != self.rho.shape:
            raise ShapeError("uncertainty report does not match the distribution length")
        self.mask = ~np.isnan(d)
        if np.any(d[self.mask] <= 0):
            raise IllPosedFitError("zero uncertainty on an included index")
        self.weights = np.zeros_like(d)
        self.weights[self.mask] = 1.0 / d[self.mask] ** 2
        self.n_included = int(self.mask.sum())
        self.N = self.rho.size - 1
        self.mean = mean_photon_number(PhotonDistribution.from_weights(np.clip(self.rho, 0, None)))

    def __call__(self, model_probs):
        return float(np.sum(self.weights * (self.rho - model_probs) ** 2))

    def default_bounds(self):
        return (0.0, max(1.0, 3.0 * self.mean + 1.0))

    def summary(self, spec, params, chi2, n_params):
        dof = self.n_included - n_params
        if dof < 1:
            raise IllPosedFitError(
                f"{self.n_included} included indices leave no degrees of freedom for {n_params} parameters"
            )
        return FitSummary(spec, params, chi2, chi2 / dof, dof)


def _family_probs(family, mu, M, N):
    if family == "coherent":
        return ModelSpec("coherent", N, mu=mu).build().probs
    if family == "thermal":
        return ModelSpec("thermal", N, mu=mu).build().probs
    return ModelSpec("multithermal", N, mu=mu, modes=M).build().probs


def _fit_single(obj: _Objective, family, M, bounds):
    N = obj.N
    mu, chi2 = _golden_min(lambda m: obj(_family_probs(family, m, M, N)), *bounds)
    return float(mu), chi2


def scan_modes(rho, delta: UncertaintyReport, modes, mu_bounds=None) -> list[FitSummary]:
    """Best multithermal fit (over ``mu``) for each mode count in ``modes``."""
    grid = ParameterGrid(modes=tuple(modes), mu_bounds=mu_bounds)
    obj = _Objective(rho, delta)
    bounds = grid.mu_bounds or obj.default_bounds()
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        for M in grid.modes:
            mu, chi2 = _fit_single(obj, "multithermal", int(M), bounds)
            spec = ModelSpec("multithermal", obj.N, mu=mu, modes=int(M))
            out.append(obj.summary(spec, {"mu": mu, "modes": int(M)}, chi2, 1))
    return out


def _best(summaries):
    # Lowest reduced chi-square; ties go to the earliest grid point.
    return min(enumerate(summaries), key=lambda t: (t[1].reduced_chi_square, t[0]))[1]


def fit_model(rho, delta: UncertaintyReport, family: str, parameter_grid: ParameterGrid | None = None) -> FitSummary:
    """Least chi-square member of ``family``.

    ``mu`` is optimized continuously within its bounds; for ``multithermal``
    the mode count is scanned over ``parameter_grid.modes``; for ``fock`` the
    photon number is scanned over ``0..N``.
    """
    if family not in FIT_FAMILIES:
        raise DomainError(f"family must be one of {FIT_FAMILIES}")
    grid = parameter_grid or ParameterGrid()
    obj = _Objective(rho, delta)
    N = obj.N
    if family == "fock":
        candidates = []
        for n0 in range(N + 1):
            spec = ModelSpec("fock", N, n0=n0)
            candidates.append(obj.summary(spec, {"n0": n0}, obj(spec.build().probs), 1))
        return _best(candidates)
    if family == "multithermal":
        scans = scan_modes(rho, delta, grid.modes, grid.mu_bounds)
        best = _best(scans)
        n_params = 2 if len(grid.modes) > 1 else 1
        return obj.summary(best.model, best.fitted_parameters, best.chi_square, n_params)
    bounds = grid.mu_bounds or obj.default_bounds()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        mu, chi2 = _fit_single(obj, family, 1, bounds)
    return obj.summary(ModelSpec(family, N, mu=mu), {"mu": mu}, chi2, 1)


def _mixture_spec(family, mu, M, w, mu_bg, N):
    base = ModelSpec("multithermal", N, mu=mu, modes=M) if family == "multithermal" \
        else ModelSpec(family, N, mu=mu)
    if w >= 1.0:
        return base
    bg = ModelSpec("coherent", N, mu=mu_bg)
    if w <= 0.0:
        return bg
    return ModelSpec("mixture", N, components=((w, base), (1.0 - w, bg)))


def poisson_background_fit(rho, delta: UncertaintyReport, base_family: str = "multithermal",
                           parameter_grid: ParameterGrid | None = None) -> FitSummary:
    """Fit ``w * base + (1 - w) * coherent(mu_bg)`` with ``w`` scanned over the grid.

    With ``weights == (1.0,)`` this is exactly :func:`fit_model` on ``base_family``.
    """
    if base_family not in ("coherent", "thermal", "multithermal"):
        raise DomainError("base family must be coherent, thermal or multithermal")
    grid = parameter_grid or ParameterGrid()
    obj = _Objective(rho, delta)
    N = obj.N
    mu_bounds = grid.mu_bounds or obj.default_bounds()
    bg_bounds = grid.background_mu_bounds or obj.default_bounds()
    modes = grid.modes if base_family == "multithermal" else (1,)

    def base_probs(mu, M):
        return _family_probs(base_family, mu, M, N)

    def bg_probs(mu_bg):
        return ModelSpec("coherent", N, mu=mu_bg).build().probs

    candidates = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        for w in grid.weights:
            w = float(w)
            for M in modes:
                M = int(M)
                if w >= 1.0:
                    mu, chi2 = _golden_min(lambda m: obj(base_probs(m, M)), *mu_bounds)
                    mu_bg = 0.0
                elif w <= 0.0:
                    mu_bg, chi2 = _golden_min(lambda m: obj(bg_probs(m)), *bg_bounds)
                    mu = 0.0
                else:
                    mu, mu_bg, chi2 = _fit_pair(
                        lambda a, b: obj(w * base_probs(a, M) + (1.0 - w) * bg_probs(b)),
                        mu_bounds, bg_bounds,
                    )
                candidates.append((chi2, float(w), M, float(mu), float(mu_bg)))

    n_params = 1
    if len(modes) > 1:
        n_params += 1
    if any(w < 1.0 for w in grid.weights):
        n_params += 1
    if len(grid.weights) > 1:
        n_params += 1
    summaries = []
    for chi2, w, M, mu, mu_bg in candidates:
        spec = _mixture_spec(base_family, mu, M, w, mu_bg, N)
        params = {"weight": w, "mu": mu, "background_mu": mu_bg}
        if base_family == "multithermal":
            params["modes"] = M
        summaries.append(obj.summary(spec, params, chi2, n_params))
    return _best(summaries)


def _fit_pair(fun, bounds_a, bounds_b, coarse=12):
    """Minimize ``fun(a, b)`` on a box: coarse grid, then L-BFGS-B polish."""
    a_grid = np.linspace(*bounds_a, coarse + 1)
    b_grid = np.linspace(*bounds_b, coarse + 1)
    best = min((fun(a, b), a, b) for a in a_grid for b in b_grid)
    res = minimize(lambda z: fun(z[0], z[1]), x0=[best[1], best[2]], method="L-BFGS-B",
                   bounds=[bounds_a, bounds_b])
    if res.fun < best[0]:
        return float(res.x[0]), float(res.x[1]), float(res.fun)
    return float(best[1]), float(best[2]), float(best[0])
