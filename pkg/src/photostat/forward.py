"""On/off detection model, synthetic datasets and dataset files.

An on/off detector of quantum efficiency ``eta`` stays silent on an ``n``-photon
input with probability ``(1 - eta)**n``; averaging over the photon-number
distribution gives the no-click probability. Dark counts are not modelled.

Dataset CSV layout::

    # optional comment lines
    eta,no_click,total
    0.2,9800000,10000000
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distributions import PhotonDistribution
from .errors import DatasetParseError, DomainError, ShapeError

CSV_HEADER = ("eta", "no_click", "total")


@dataclass(frozen=True, eq=False)
class EfficiencyGrid:
    """Strictly increasing quantum efficiencies in ``[0, 1]``, at least two of them."""

    etas: np.ndarray

    def __post_init__(self):
        etas = np.array(self.etas, dtype=float)
        if etas.ndim != 1 or etas.size < 2:
            raise DomainError("an efficiency grid needs at least two values")
        if not np.all(np.isfinite(etas)) or etas.min() < 0 or etas.max() > 1:
            raise DomainError("efficiencies must lie in [0, 1]")
        if np.any(np.diff(etas) <= 0):
            raise DomainError("efficiencies must be strictly increasing")
        etas.flags.writeable = False
        object.__setattr__(self, "etas", etas)

    @classmethod
    def equally_spaced(cls, K: int, eta_max: float, eta_min: float | None = None):
        """``K`` values from ``eta_min`` to ``eta_max``; ``eta_min`` defaults to ``eta_max / K``.

        The default yields ``eta_max * k / K`` for ``k = 1..K``, i.e. an equally
        spaced grid on ``(0, eta_max]``.
        """
        if K < 2:
            raise DomainError("K must be >= 2")
        if eta_min is None:
            return cls(np.round(eta_max * np.arange(1, K + 1) / K, 12))
        return cls(np.linspace(eta_min, eta_max, K))

    @property
    def K(self) -> int:
        return self.etas.size

    def __len__(self):
        return self.etas.size

    def __eq__(self, other):
        if not isinstance(other, EfficiencyGrid):
            return NotImplemented
        return np.array_equal(self.etas, other.etas)

    def __hash__(self):
        return hash(self.etas.tobytes())


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """``entries[nu, n] = (1 - eta_nu)**n`` for ``n = 0..truncation``."""

    entries: np.ndarray
    grid: EfficiencyGrid
    truncation: int

    @property
    def clicks(self) -> np.ndarray:
        """Complementary click probabilities ``1 - entries``."""
        return 1.0 - self.entries


def _powers(transmission, N):
    # Shared by the scalar and matrix paths so both agree bit-for-bit.
    return np.power.outer(np.atleast_1d(transmission), np.arange(N + 1, dtype=float))


def response_matrix_entries(etas, N: int) -> np.ndarray:
    """``(1 - eta)**n`` for arbitrary efficiencies (no grid invariants enforced)."""
    if int(N) != N or N < 0:
        raise DomainError(f"truncation must be a nonnegative integer, got {N!r}")
    etas = np.asarray(etas, dtype=float)
    if np.any(etas < 0) or np.any(etas > 1):
        raise DomainError("efficiencies must lie in [0, 1]")
    return _powers(1.0 - etas, int(N))


def response_matrix(grid: EfficiencyGrid, N: int) -> ResponseMatrix:
    entries = response_matrix_entries(grid.etas, N)
    entries.flags.writeable = False
    return ResponseMatrix(entries, grid, int(N))


def no_click_probability(d: PhotonDistribution, eta: float) -> float:
    """Probability that a detector of efficiency ``eta`` does not fire."""
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"efficiency must lie in [0, 1], got {eta!r}")
    row = _powers(1.0 - eta, d.truncation)
    return float((row @ d.probs)[0])


def no_click_probabilities(d: PhotonDistribution, grid: EfficiencyGrid) -> np.ndarray:
    return response_matrix(grid, d.truncation).entries @ d.probs


@dataclass(frozen=True, eq=False)
class OnOffDataset:
    """No-click counts ``n0`` out of ``total`` runs at each grid efficiency."""

    grid: EfficiencyGrid
    no_click: np.ndarray
    total: np.ndarray

    def __post_init__(self):
        n0 = np.array(self.no_click)
        n = np.array(self.total)
        for name, arr in (("no_click", n0), ("total", n)):
            if arr.ndim != 1 or arr.size != self.grid.K:
                raise ShapeError(f"{name} must have one entry per efficiency ({self.grid.K})")
            if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
                raise DomainError(f"{name} counts must be integers")
        n0 = n0.astype(np.int64)
        n = n.astype(np.int64)
        if np.any(n < 1):
            raise DomainError("every efficiency needs at least one run")
        if np.any(n0 < 0) or np.any(n0 > n):
            raise DomainError("no-click counts must satisfy 0 <= no_click <= total")
        n0.flags.writeable = False
        n.flags.writeable = False
        object.__setattr__(self, "no_click", n0)
        object.__setattr__(self, "total", n)

    @property
    def frequencies(self) -> np.ndarray:
        return self.no_click / self.total

    @property
    def K(self) -> int:
        return self.grid.K

    def __eq__(self, other):
        if not isinstance(other, OnOffDataset):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.no_click, other.no_click)
            and np.array_equal(self.total, other.total)
        )

    def to_dict(self) -> dict:
        return {
            "grid": {"etas": [float(e) for e in self.grid.etas]},
            "no_click_counts": [int(c) for c in self.no_click],
            "total_runs": [int(c) for c in self.total],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "OnOffDataset":
        try:
            return cls(
                EfficiencyGrid(obj["grid"]["etas"]),
                obj["no_click_counts"],
                obj["total_runs"],
            )
        except KeyError as exc:
            raise DatasetParseError(f"missing field {exc.args[0]!r}") from None


def simulate_dataset(d: PhotonDistribution, grid: EfficiencyGrid, runs_per_eta, seed: int) -> OnOffDataset:
    """Draw binomial no-click counts for every efficiency.

    Each efficiency index ``nu`` gets its own generator seeded from
    ``(seed, nu)``, so rows are reproducible independently of each other.
    """
    runs = np.broadcast_to(np.asarray(runs_per_eta, dtype=np.int64), (grid.K,))
    if np.any(runs < 1):
        raise DomainError("runs per efficiency must be >= 1")
    if isinstance(seed, bool) or int(seed) != seed or seed < 0:
        raise DomainError(f"seed must be a nonnegative integer, got {seed!r}")
    p = np.clip(no_click_probabilities(d, grid), 0.0, 1.0)
    counts = np.empty(grid.K, dtype=np.int64)
    for nu in range(grid.K):
        rng = np.random.default_rng([int(seed), nu])
        counts[nu] = rng.binomial(int(runs[nu]), p[nu])
    return OnOffDataset(grid, counts, runs.copy())


def dumps_dataset(data: OnOffDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for eta, n0, n in zip(data.grid.etas, data.no_click, data.total):
        writer.writerow((repr(float(eta)), int(n0), int(n)))
    return buf.getvalue()


def loads_dataset(text: str) -> OnOffDataset:
    etas, n0s, ns = [], [], []
    header_seen = False
    last_line = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if not header_seen:
            if tuple(fields) != CSV_HEADER:
                raise DatasetParseError(f"expected header {','.join(CSV_HEADER)!r}", lineno)
            header_seen = True
            continue
        if len(fields) != 3:
            raise DatasetParseError(f"expected 3 fields, got {len(fields)}", lineno)
        try:
            eta = float(fields[0])
            n0 = int(fields[1])
            n = int(fields[2])
        except ValueError:
            raise DatasetParseError(f"cannot parse row {line!r}", lineno) from None
        if not 0.0 <= eta <= 1.0:
            raise DatasetParseError(f"efficiency {eta!r} outside [0, 1]", lineno)
        if n < 1 or n0 < 0 or n0 > n:
            raise DatasetParseError(f"inconsistent counts no_click={n0}, total={n}", lineno)
        if etas and eta <= etas[-1]:
            raise DatasetParseError("efficiencies must be strictly increasing", lineno)
        etas.append(eta)
        n0s.append(n0)
        ns.append(n)
        last_line = lineno
    if not header_seen:
        raise DatasetParseError("missing header line")
    if len(etas) < 2:
        raise DatasetParseError("a dataset needs at least two efficiency rows", last_line or None)
    return OnOffDataset(EfficiencyGrid(etas), n0s, ns)


def save_dataset(data: OnOffDataset, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(data.to_dict(), indent=2) + "\n", encoding="utf-8")
    else:
        path.write_text(dumps_dataset(data), encoding="utf-8")


def load_dataset(path) -> OnOffDataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(exc.msg, exc.lineno) from None
        try:
            return OnOffDataset.from_dict(obj)
        except (DomainError, ShapeError) as exc:
            raise DatasetParseError(str(exc)) from None
    return loads_dataset(text)
