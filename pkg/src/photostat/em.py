"""Expectation-maximization reconstruction of photon statistics from on/off data.

Two multiplicative update rules are available:

``"binomial"`` (default)
    The EM iteration for the full binomial likelihood of the on/off record,
    using both the no-click and the click frequencies::

        rho_n <- rho_n * sum_nu w_nu [A_nun f_nu / p_nu + (1 - A_nun)(1 - f_nu)/(1 - p_nu)]

    with ``w_nu`` the fraction of all runs taken at efficiency ``nu``. It never
    decreases :func:`log_likelihood`.

``"linpos"``
    The classic LINPOS update driven by the no-click frequencies alone::

        rho_n <- rho_n * sum_nu [A_nun / sum_lambda A_lambdan] f_nu / p_nu

    Its iterates increase ``sum_nu f_nu log(p_nu / sum_mu p_mu)``
    (see :func:`linpos_objective`) but not necessarily the binomial
    likelihood, and it converges far more slowly at small efficiencies.

Both rules share the same fixed points on exactly realizable data, keep zero
entries at zero, and are followed by an explicit renormalization.

The stopping rule is the total absolute error ``sum_nu |f_nu - p_nu|`` over
the ``K`` dataset rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import poisson

from . import _kernels
from .distributions import PhotonDistribution, fidelity
from .errors import DegenerateDataError, DomainError, ShapeError
from .forward import OnOffDataset, ResponseMatrix, response_matrix, response_matrix_entries

UPDATE_RULES = ("binomial", "linpos")
MAX_TRUNCATION = 200
DEFAULT_MAX_ITERATIONS = 10**6
DEFAULT_TOLERANCE_PER_ROW = 1e-7


@dataclass(frozen=True)
class EmConfig:
    """Solver settings.

    Attributes:
        truncation: highest photon number ``N`` reconstructed.
        max_iterations: iteration cap.
        tolerance: stopping level for the total error; ``None`` means ``1e-7 * K``.
        trace_stride: record diagnostics every this many iterations.
        init: starting distribution, uniform when ``None``. Must be strictly positive.
        update: ``"binomial"`` or ``"linpos"``.
    """

    truncation: int
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    tolerance: float | None = None
    trace_stride: int = 1000
    init: PhotonDistribution | None = None
    update: str = "binomial"

    def __post_init__(self):
        N = self.truncation
        if isinstance(N, bool) or int(N) != N or not 1 <= N <= MAX_TRUNCATION:
            raise DomainError(f"truncation must be an integer in [1, {MAX_TRUNCATION}]")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise DomainError("max_iterations must be an integer >= 1")
        if self.tolerance is not None and not self.tolerance > 0:
            raise DomainError("tolerance must be > 0")
        if int(self.trace_stride) != self.trace_stride or self.trace_stride < 1:
            raise DomainError("trace_stride must be an integer >= 1")
        if self.update not in UPDATE_RULES:
            raise DomainError(f"update must be one of {UPDATE_RULES}")
        if self.init is not None:
            if self.init.truncation != N:
                raise ShapeError("init distribution has the wrong truncation")
            if np.any(self.init.probs <= 0):
                raise DomainError("init distribution must be strictly positive")

    def tolerance_for(self, K: int) -> float:
        return self.tolerance if self.tolerance is not None else DEFAULT_TOLERANCE_PER_ROW * K


class TracePoint(NamedTuple):
    iteration: int
    epsilon: float
    log_likelihood: float
    fidelity: float | None


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    rho: PhotonDistribution
    iterations_run: int
    final_epsilon: float
    converged: bool
    trace: list = field(default_factory=list)
    etas: np.ndarray | None = None
    update: str = "binomial"

    def to_dict(self) -> dict:
        out = {
            "rho": [float(x) for x in self.rho.probs],
            "iterations": int(self.iterations_run),
            "epsilon": float(self.final_epsilon),
            "converged": bool(self.converged),
            "trace": [
                [int(t.iteration), float(t.epsilon), _json_float(t.log_likelihood),
                 None if t.fidelity is None else float(t.fidelity)]
                for t in self.trace
            ],
            "update": self.update,
        }
        if self.etas is not None:
            out["etas"] = [float(e) for e in self.etas]
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ReconstructionResult":
        try:
            trace = [
                TracePoint(int(i), float(e), float(ll), None if g is None else float(g))
                for i, e, ll, g in obj["trace"]
            ]
            return cls(
                rho=PhotonDistribution(obj["rho"], label="reconstruction"),
                iterations_run=int(obj["iterations"]),
                final_epsilon=float(obj["epsilon"]),
                converged=bool(obj["converged"]),
                trace=trace,
                etas=None if obj.get("etas") is None else np.asarray(obj["etas"], dtype=float),
                update=obj.get("update", "binomial"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DomainError(f"malformed reconstruction result: {exc}") from None


def _json_float(x):
    # JSON has no infinities; keep the -inf likelihood sentinel as a string.
    return x if math.isfinite(x) else ("-inf" if x < 0 else "inf")


def _matrix(A):
    return A.entries if isinstance(A, ResponseMatrix) else np.asarray(A, dtype=float)


def _as_probs(rho):
    return rho.probs if isinstance(rho, PhotonDistribution) else np.asarray(rho, dtype=float)


def total_error(rho, A, f) -> float:
    """``sum_nu |f_nu - p_nu|`` for the no-click probabilities implied by ``rho``."""
    a = _matrix(A)
    x = _as_probs(rho)
    f = np.asarray(f, dtype=float)
    if a.shape != (f.size, x.size):
        raise ShapeError(f"matrix {a.shape} incompatible with rho {x.size} and f {f.size}")
    return float(np.abs(f - a @ x).sum())


def binomial_log_likelihood(p, q, no_click, total) -> float:
    """``sum n0 log p + (n - n0) log q`` with ``q`` the click probability.

    Returns ``-inf`` when observed events have zero model probability.
    Counts may be fractional (e.g. exact frequencies times a run count).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n0 = np.asarray(no_click, dtype=float)
    n1 = np.asarray(total, dtype=float) - n0
    if np.any((p <= 0) & (n0 > 0)) or np.any((q <= 0) & (n1 > 0)):
        return -math.inf
    with np.errstate(divide="ignore"):
        lp = np.where(n0 > 0, n0 * np.log(np.where(p > 0, p, 1.0)), 0.0)
        lq = np.where(n1 > 0, n1 * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return float(lp.sum() + lq.sum())


def log_likelihood(rho, data: OnOffDataset) -> float:
    """Binomial log-likelihood of the dataset under ``rho`` (constants dropped)."""
    x = _as_probs(rho)
    R = response_matrix(data.grid, x.size - 1)
    return binomial_log_likelihood(R.entries @ x, R.clicks @ x, data.no_click, data.total)


def linpos_objective(rho, A, f) -> float:
    """``sum_nu f_nu log(p_nu / sum_mu p_mu)``, the quantity the LINPOS update increases."""
    a = _matrix(A)
    p = a @ _as_probs(rho)
    f = np.asarray(f, dtype=float)
    if np.any((p <= 0) & (f > 0)):
        return -math.inf
    with np.errstate(divide="ignore"):
        terms = np.where(f > 0, f * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(terms.sum() - f.sum() * math.log(p.sum()))


class _Updater:
    """Precomputed pieces of one update rule for a fixed (A, f, weights)."""

    def __init__(self, A, f, runs, rule):
        self.A = np.ascontiguousarray(_matrix(A), dtype=float)
        self.C = 1.0 - self.A
        self.f = np.ascontiguousarray(f, dtype=float)
        K, M = self.A.shape
        if self.f.shape != (K,):
            raise ShapeError(f"frequency vector has length {self.f.size}, expected {K}")
        if np.any(self.f < 0) or np.any(self.f > 1):
            raise DomainError("frequencies must lie in [0, 1]")
        self.rule = _kernels.BINOMIAL if rule == "binomial" else _kernels.LINPOS
        if runs is None:
            w = np.full(K, 1.0 / K)
        else:
            w = np.asarray(runs, dtype=float)
            w = w / w.sum()
        self.wf = w * self.f
        self.wg = w * (1.0 - self.f)
        self.col = self.A.sum(axis=0)
        self.p = np.empty(K)
        self.q = np.empty(K)

    def probabilities(self, x):
        """Return ``(p, q, epsilon)`` for iterate ``x`` (arrays are reused)."""
        eps = _kernels.probabilities(x, self.A, self.C, self.f, self.p, self.q)
        return self.p, self.q, eps

    def advance(self, x, n_steps, tol):
        """Run up to ``n_steps`` updates on ``x`` in place; return ``(done, status)``."""
        return _kernels.iterate(
            x, self.A, self.C, self.f, self.wf, self.wg, self.col, self.rule, n_steps, tol
        )


def _raise_degenerate():
    raise DegenerateDataError("observed outcomes have zero probability under the current iterate")


def em_step(rho, A, f, runs=None, update="binomial") -> PhotonDistribution:
    """Apply one multiplicative EM update to ``rho`` and renormalize.

    Args:
        rho: current iterate (distribution or probability vector).
        A: response matrix (or its ``entries`` array) of shape ``(K, N+1)``.
        f: observed no-click frequencies, length ``K``.
        runs: runs per efficiency; only the binomial rule uses them, as weights.
            Equal weights when ``None``.
        update: ``"binomial"`` or ``"linpos"``.

    Raises:
        DegenerateDataError: observed outcomes have zero model probability.
    """
    if update not in UPDATE_RULES:
        raise DomainError(f"update must be one of {UPDATE_RULES}")
    x = np.array(_as_probs(rho), dtype=float)
    up = _Updater(A, f, runs, update)
    if up.A.shape[1] != x.size:
        raise ShapeError(f"rho has length {x.size}, matrix has {up.A.shape[1]} columns")
    _, status = up.advance(x, 1, -1.0)
    if status == _kernels.DEGENERATE:
        _raise_degenerate()
    return PhotonDistribution(x, label="em iterate")


def suggest_truncation(data: OnOffDataset, tail: float = 1e-8, floor: int = 8) -> int:
    """Heuristic truncation for a dataset.

    Estimates a mean photon number by fitting ``-log f = eta * mu`` through the
    origin, then returns the smallest ``N >= floor`` for which a Poisson law of
    that mean leaves less than ``tail`` above ``N``.
    """
    f = data.frequencies
    eta = data.grid.etas
    use = (f > 0) & (eta > 0)
    mu = 0.0
    if np.any(use):
        mu = max(0.0, float(np.sum(eta[use] * -np.log(f[use])) / np.sum(eta[use] ** 2)))
    N = floor
    while N < MAX_TRUNCATION and poisson.sf(N, mu) >= tail:
        N += 1
    return N


def reconstruct(data: OnOffDataset, config: EmConfig, reference: PhotonDistribution | None = None) -> ReconstructionResult:
    """Iterate the EM update from ``config.init`` until the total error drops
    to the tolerance or the iteration cap is reached.

    The trace holds ``(iteration, epsilon, log_likelihood, fidelity)`` for
    iteration 0, every ``trace_stride``-th iterate and the final iterate;
    fidelity is ``None`` unless ``reference`` is given.
    """
    return reconstruct_frequencies(
        data.frequencies, data.grid.etas, config, runs=data.total, reference=reference
    )


def reconstruct_frequencies(f, etas, config: EmConfig, runs=None,
                            reference: PhotonDistribution | None = None) -> ReconstructionResult:
    """:func:`reconstruct` on bare no-click frequencies.

    ``runs`` weights the efficiencies and scales the trace log-likelihood;
    it defaults to one run per efficiency, so the likelihood is then per run.
    """
    N = config.truncation
    if reference is not None and reference.truncation != N:
        raise ShapeError("reference truncation differs from the reconstruction truncation")
    etas = np.asarray(etas, dtype=float)
    f = np.asarray(f, dtype=float)
    runs = np.ones(etas.size) if runs is None else np.asarray(runs, dtype=float)
    if f.shape != etas.shape or runs.shape != etas.shape:
        raise ShapeError("frequencies, efficiencies and runs must have the same length")
    A = response_matrix_entries(etas, N)
    up = _Updater(A, f, runs, config.update)
    tol = config.tolerance_for(etas.size)
    stride = config.trace_stride
    no_click = runs * f

    if config.init is None:
        x = np.full(N + 1, 1.0 / (N + 1))
    else:
        x = np.array(config.init.probs, dtype=float)
    x = np.ascontiguousarray(x)

    trace = []
    i = 0
    while True:
        p, q, eps = up.probabilities(x)
        converged = eps <= tol
        ll = binomial_log_likelihood(p, q, no_click, runs)
        g = None if reference is None else fidelity(x, reference.probs)
        trace.append(TracePoint(i, eps, ll, g))
        if converged or i == config.max_iterations:
            break
        n_steps = min(stride - i % stride, config.max_iterations - i)
        done, status = up.advance(x, n_steps, tol)
        i += done
        if status == _kernels.DEGENERATE:
            _raise_degenerate()

    return ReconstructionResult(
        rho=PhotonDistribution(x, label="reconstruction"),
        iterations_run=i,
        final_epsilon=eps,
        converged=converged,
        trace=trace,
        etas=etas.copy(),
        update=config.update,
    )
