"""Photon-number distributions over a truncated Fock basis.

All constructors evaluate the untruncated law on ``0..N`` and renormalize.
When the discarded tail carries more than :data:`TAIL_WARNING_LEVEL` of the
probability a :class:`TruncationWarning` is emitted and the lost mass is kept
on the result as ``tail_mass``.

Multithermal states are modelled as ``M`` equally populated thermal modes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import DomainError, ShapeError, TruncationError

TAIL_WARNING_LEVEL = 1e-6
NORMALIZATION_TOL = 1e-9
WEIGHT_TOL = 1e-12

FAMILIES = ("fock", "coherent", "thermal", "multithermal", "mixture")


class TruncationWarning(UserWarning):
    """Emitted when renormalization hides a non-negligible truncated tail."""


@dataclass(frozen=True, eq=False)
class PhotonDistribution:
    """Normalized photon-number probabilities ``probs[n]``, ``n = 0..N``."""

    probs: np.ndarray
    label: str = ""
    tail_mass: float = 0.0

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 1:
            raise ShapeError("probs must be a non-empty 1-D vector")
        if not np.all(np.isfinite(probs)):
            raise DomainError("probs must be finite")
        if np.any(probs < 0):
            raise DomainError("probs must be nonnegative")
        total = probs.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise DomainError(f"probs sum to {total!r}, expected 1")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_weights(cls, weights, label="", tail_mass=0.0):
        """Build a distribution from nonnegative, not necessarily normalized weights."""
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not total > 0:
            raise DomainError("weights must have positive total mass")
        return cls(w / total, label=label, tail_mass=tail_mass)

    @property
    def truncation(self) -> int:
        return self.probs.size - 1

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        if not isinstance(other, PhotonDistribution):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash((self.label, self.probs.tobytes()))

    def to_dict(self) -> dict:
        return {"label": self.label, "probs": [float(p) for p in self.probs]}

    @classmethod
    def from_dict(cls, obj: dict) -> "PhotonDistribution":
        try:
            return cls(obj["probs"], label=str(obj.get("label", "")))
        except KeyError as exc:
            raise DomainError(f"missing field {exc.args[0]!r}") from None


def _check_truncation(N):
    if int(N) != N or N < 0:
        raise DomainError(f"truncation must be a nonnegative integer, got {N!r}")
    return int(N)


def _from_log_pmf(log_pmf, label):
    pmf = np.exp(log_pmf)
    tail = max(0.0, 1.0 - pmf.sum())
    if tail > TAIL_WARNING_LEVEL:
        warnings.warn(
            f"{label}: truncation drops {tail:.3g} of the probability mass",
            TruncationWarning,
            stacklevel=3,
        )
    return PhotonDistribution.from_weights(pmf, label=label, tail_mass=tail)


def make_fock(n0: int, N: int) -> PhotonDistribution:
    """Fock state ``|n0>`` in a space truncated at ``N`` photons."""
    N = _check_truncation(N)
    if int(n0) != n0 or n0 < 0:
        raise DomainError(f"photon number must be a nonnegative integer, got {n0!r}")
    if n0 > N:
        raise TruncationError(f"n0={n0} exceeds truncation N={N}")
    probs = np.zeros(N + 1)
    probs[int(n0)] = 1.0
    return PhotonDistribution(probs, label=f"fock({int(n0)})")


def make_coherent(mu: float, N: int) -> PhotonDistribution:
    """Poisson statistics of a coherent state with mean photon number ``mu``."""
    N = _check_truncation(N)
    if not mu >= 0:
        raise DomainError(f"mean photon number must be >= 0, got {mu!r}")
    label = f"coherent(mu={mu:g})"
    if mu == 0:
        return PhotonDistribution(make_fock(0, N).probs, label=label)
    n = np.arange(N + 1)
    return _from_log_pmf(n * math.log(mu) - mu - gammaln(n + 1), label)


def make_multithermal(mu: float, M: int, N: int) -> PhotonDistribution:
    """``M`` equally populated thermal modes with total mean ``mu``.

    ``probs[n] = C(n+M-1, n) (mu/M)^n / (1 + mu/M)^(n+M)``, evaluated in log
    space so that ``M`` in the tens of thousands does not overflow.
    """
    N = _check_truncation(N)
    if not mu >= 0:
        raise DomainError(f"mean photon number must be >= 0, got {mu!r}")
    if isinstance(M, bool) or int(M) != M or M < 1:
        raise DomainError(f"mode count must be an integer >= 1, got {M!r}")
    M = int(M)
    label = f"multithermal(mu={mu:g}, M={M})"
    if mu == 0:
        return PhotonDistribution(make_fock(0, N).probs, label=label)
    n = np.arange(N + 1)
    x = mu / M
    log_pmf = (
        gammaln(n + M) - gammaln(n + 1) - gammaln(M)
        + n * math.log(x) - (n + M) * math.log1p(x)
    )
    return _from_log_pmf(log_pmf, label)


def make_thermal(mu: float, N: int) -> PhotonDistribution:
    """Single-mode thermal (Bose-Einstein) statistics."""
    d = make_multithermal(mu, 1, N)
    return PhotonDistribution(d.probs, label=f"thermal(mu={mu:g})", tail_mass=d.tail_mass)


def make_mixture(components) -> PhotonDistribution:
    """Convex combination of ``(weight, PhotonDistribution)`` pairs."""
    components = list(components)
    if not components:
        raise DomainError("mixture needs at least one component")
    weights = np.array([float(w) for w, _ in components])
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_TOL:
        raise DomainError("mixture weights must be >= 0 and sum to 1")
    sizes = {len(d) for _, d in components}
    if len(sizes) != 1:
        raise ShapeError(f"mixture components have different truncations: {sorted(sizes)}")
    dists = [d for _, d in components]
    probs = sum(w * d.probs for w, d in zip(weights, dists))
    label = " + ".join(f"{w:g}*{d.label}" for w, d in zip(weights, dists))
    return PhotonDistribution.from_weights(probs, label=label)


def heralded_photon(vacuum: float, two_photon_ratio: float, N: int) -> PhotonDistribution:
    """Single photon contaminated by vacuum and a two-photon component.

    ``rho_0 = vacuum``, ``rho_2 = two_photon_ratio * rho_1``; ``rho_1`` follows
    from normalization.
    """
    if not 0 <= vacuum <= 1 or two_photon_ratio < 0:
        raise DomainError("vacuum must lie in [0, 1] and two_photon_ratio must be >= 0")
    if N < 2 and two_photon_ratio > 0:
        raise TruncationError("a two-photon component needs N >= 2")
    rho1 = (1.0 - vacuum) / (1.0 + two_photon_ratio)
    parts = [(vacuum, make_fock(0, N)), (rho1, make_fock(1, N))]
    if N >= 2:
        parts.append((1.0 - vacuum - rho1, make_fock(2, N)))
    mixed = make_mixture(parts)
    return PhotonDistribution(
        mixed.probs, label=f"heralded(vacuum={vacuum:g}, ratio={two_photon_ratio:g})"
    )


def mean_photon_number(d: PhotonDistribution) -> float:
    return float(np.arange(len(d)) @ d.probs)


def fidelity(a: PhotonDistribution, b: PhotonDistribution) -> float:
    """Overlap ``sum_n sqrt(a_n b_n)``; 1 iff the distributions coincide."""
    pa = a.probs if isinstance(a, PhotonDistribution) else np.asarray(a, dtype=float)
    pb = b.probs if isinstance(b, PhotonDistribution) else np.asarray(b, dtype=float)
    if pa.shape != pb.shape:
        raise ShapeError(f"length mismatch: {pa.size} vs {pb.size}")
    return float(min(1.0, np.sqrt(pa * pb).sum()))


@dataclass(frozen=True)
class ModelSpec:
    """Parametric description of a state family, serializable to JSON.

    Parameters used per family: ``n0`` (fock), ``mu`` (coherent, thermal),
    ``mu`` and ``modes`` (multithermal), ``components`` as a tuple of
    ``(weight, ModelSpec)`` (mixture). Components inherit ``truncation``.
    """

    family: str
    truncation: int
    mu: float | None = None
    modes: int | None = None
    n0: int | None = None
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        _check_truncation(self.truncation)
        if self.family == "fock":
            if self.n0 is None:
                raise DomainError("fock model needs n0")
        elif self.family in ("coherent", "thermal", "multithermal"):
            if self.mu is None or not self.mu >= 0:
                raise DomainError(f"{self.family} model needs mu >= 0")
            if self.family == "multithermal":
                m = self.modes
                if m is None or isinstance(m, bool) or int(m) != m or m < 1:
                    raise DomainError("multithermal model needs integer modes >= 1")
        else:
            if not self.components:
                raise DomainError("mixture model needs components")
            weights = [w for w, _ in self.components]
            if min(weights) < 0 or abs(sum(weights) - 1.0) > WEIGHT_TOL:
                raise DomainError("mixture weights must be >= 0 and sum to 1")

    def build(self) -> PhotonDistribution:
        N = self.truncation
        if self.family == "fock":
            return make_fock(self.n0, N)
        if self.family == "coherent":
            return make_coherent(self.mu, N)
        if self.family == "thermal":
            return make_thermal(self.mu, N)
        if self.family == "multithermal":
            return make_multithermal(self.mu, self.modes, N)
        parts = [(w, _with_truncation(m, N).build()) for w, m in self.components]
        return make_mixture(parts)

    def to_dict(self) -> dict:
        out = {"family": self.family, "truncation": self.truncation}
        if self.family == "fock":
            out["n0"] = self.n0
        elif self.family == "mixture":
            out["components"] = [
                {"weight": w, "model": _strip_truncation(m.to_dict())} for w, m in self.components
            ]
        else:
            out["mu"] = self.mu
            if self.family == "multithermal":
                out["modes"] = self.modes
        return out

    @classmethod
    def from_dict(cls, obj: dict, truncation: int | None = None) -> "ModelSpec":
        """Parse a JSON object; ``truncation`` overrides any value in ``obj``."""
        if not isinstance(obj, dict) or "family" not in obj:
            raise DomainError("model spec must be an object with a 'family' field")
        N = truncation if truncation is not None else obj.get("truncation")
        if N is None:
            raise DomainError("model spec needs a truncation")
        components = tuple(
            (float(c["weight"]), cls.from_dict(c["model"], truncation=N))
            for c in obj.get("components", ())
        )
        return cls(
            family=obj["family"],
            truncation=int(N),
            mu=None if obj.get("mu") is None else float(obj["mu"]),
            modes=obj.get("modes"),
            n0=obj.get("n0"),
            components=components,
        )


def _with_truncation(spec: ModelSpec, N: int) -> ModelSpec:
    if spec.truncation == N:
        return spec
    return ModelSpec.from_dict(spec.to_dict(), truncation=N)


def _strip_truncation(obj: dict) -> dict:
    obj = dict(obj)
    obj.pop("truncation", None)
    return obj
