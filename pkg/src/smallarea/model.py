"""Domain types shared by fitters, predictors, and the simulation harness.

A dataset couples unit-level records (response, covariates, unit variance
multiplier) with area-level summaries (population size, covariate means,
area variance multiplier). Internally everything is stored as dense arrays
with units grouped contiguously by area; the area order is the order of
first appearance in the unit list and all per-area outputs follow it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

GEE = "gee"
MLE = "mle"


@dataclass(frozen=True)
class UnitRecord:
    area_id: str
    y: float
    x: tuple[float, ...]
    k: float = 1.0


@dataclass(frozen=True)
class AreaInfo:
    area_id: str
    N: int
    n: int
    Xbar: tuple[float, ...]
    h: float = 1.0


@dataclass
class Dataset:
    """Array-backed dataset; construct via :meth:`from_units` or :meth:`from_arrays`.

    Fields (units sorted into area blocks, original within-area order kept):
      area_ids   per-area labels, order of first appearance
      y, X, k    unit arrays, shapes (n,), (n, p), (n,)
      area_index per-unit area position, shape (n,)
      starts     block boundaries, shape (m + 1,); area i owns [starts[i], starts[i+1])
      N, n_i, Xbar, h   per-area arrays
    """

    area_ids: tuple
    y: np.ndarray
    X: np.ndarray
    k: np.ndarray
    area_index: np.ndarray
    starts: np.ndarray
    N: np.ndarray
    n_i: np.ndarray
    Xbar: np.ndarray
    h: np.ndarray

    @property
    def m(self) -> int:
        return len(self.area_ids)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def units(self) -> list[UnitRecord]:
        ids = [self.area_ids[j] for j in self.area_index]
        return [
            UnitRecord(ids[j], float(self.y[j]), tuple(self.X[j]), float(self.k[j]))
            for j in range(self.n)
        ]

    @property
    def areas(self) -> list[AreaInfo]:
        return [
            AreaInfo(self.area_ids[i], int(self.N[i]), int(self.n_i[i]),
                     tuple(self.Xbar[i]), float(self.h[i]))
            for i in range(self.m)
        ]

    @classmethod
    def from_units(cls, units: Sequence[UnitRecord], areas: Sequence[AreaInfo]) -> "Dataset":
        order = []
        seen = {}
        for u in units:
            if u.area_id not in seen:
                seen[u.area_id] = len(order)
                order.append(u.area_id)
        info = {a.area_id: a for a in areas}
        # areas never referenced by a unit are kept after the referenced ones
        extra = [a.area_id for a in areas if a.area_id not in seen]
        all_ids = order + extra
        p = len(units[0].x) if units else (len(areas[0].Xbar) if areas else 0)
        by_area = {aid: [] for aid in all_ids}
        for u in units:
            by_area[u.area_id].append(u)
        y, X, k, idx = [], [], [], []
        starts = [0]
        for i, aid in enumerate(all_ids):
            for u in by_area[aid]:
                y.append(u.y)
                X.append(u.x if len(u.x) == p else tuple(u.x)[:p])
                k.append(u.k)
                idx.append(i)
            starts.append(len(y))
        m = len(all_ids)
        N = np.array([info[a].N if a in info else 0 for a in all_ids], dtype=np.int64)
        n_arr = np.array([info[a].n if a in info else 0 for a in all_ids], dtype=np.int64)
        Xbar = np.array(
            [info[a].Xbar if a in info else (np.nan,) * p for a in all_ids], dtype=float
        ).reshape(m, p)
        h = np.array([info[a].h if a in info else 1.0 for a in all_ids], dtype=float)
        return cls(
            area_ids=tuple(all_ids),
            y=np.asarray(y, dtype=float),
            X=np.asarray(X, dtype=float).reshape(len(y), p),
            k=np.asarray(k, dtype=float),
            area_index=np.asarray(idx, dtype=np.int64),
            starts=np.asarray(starts, dtype=np.int64),
            N=N,
            n_i=n_arr,
            Xbar=Xbar,
            h=h,
        )

    @classmethod
    def from_arrays(cls, area_of_unit, y, X, k=None, N=None, Xbar=None, h=None,
                    area_ids=None) -> "Dataset":
        """Build from flat unit arrays; area summaries default to sample values.

        ``area_of_unit`` holds hashable labels per unit. When ``Xbar`` / ``N``
        are omitted they fall back to within-sample means / sample sizes.
        """
        area_of_unit = list(area_of_unit)
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        nunits = y.shape[0]
        k = np.ones(nunits) if k is None else np.asarray(k, dtype=float)
        labels = []
        pos = {}
        for a in area_of_unit:
            if a not in pos:
                pos[a] = len(labels)
                labels.append(a)
        if area_ids is not None:
            for a in area_ids:
                if a not in pos:
                    pos[a] = len(labels)
                    labels.append(a)
        m = len(labels)
        idx_unsorted = np.array([pos[a] for a in area_of_unit], dtype=np.int64)
        order = np.argsort(idx_unsorted, kind="stable")
        y, X, k = y[order], X[order], k[order]
        idx = idx_unsorted[order]
        counts = np.bincount(idx, minlength=m)
        starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        n_arr = counts.astype(np.int64)
        if Xbar is None:
            Xbar = np.zeros((m, X.shape[1]))
            for i in range(m):
                blk = slice(starts[i], starts[i + 1])
                Xbar[i] = X[blk].mean(axis=0) if n_arr[i] else np.nan
        else:
            Xbar = np.asarray(Xbar, dtype=float).reshape(m, X.shape[1])
        N = n_arr.copy() if N is None else np.asarray(N, dtype=np.int64)
        h = np.ones(m) if h is None else np.asarray(h, dtype=float)
        return cls(tuple(labels), y, X, k, idx, starts, N, n_arr, Xbar, h)

    def replace_y(self, y: np.ndarray) -> "Dataset":
        """Copy with a new response vector (bootstrap fast path)."""
        return Dataset(self.area_ids, np.asarray(y, dtype=float), self.X, self.k,
                       self.area_index, self.starts, self.N, self.n_i, self.Xbar, self.h)

    def drop_area(self, i: int) -> "Dataset":
        """Copy with area ``i``'s units and summary removed."""
        keep = self.area_index != i
        labels = [a for j, a in enumerate(self.area_ids) if j != i]
        sel = np.arange(self.m) != i
        new_idx = self.area_index[keep]
        new_idx = new_idx - (new_idx > i)
        counts = np.bincount(new_idx, minlength=self.m - 1)
        starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return Dataset(tuple(labels), self.y[keep], self.X[keep], self.k[keep],
                       new_idx, starts, self.N[sel], self.n_i[sel], self.Xbar[sel],
                       self.h[sel])

    def area_means(self) -> tuple[np.ndarray, np.ndarray]:
        """Sample means (ybar, xbar) per area."""
        m = self.m
        ybar = np.zeros(m)
        xbar = np.zeros((m, self.p))
        for i in range(m):
            blk = slice(self.starts[i], self.starts[i + 1])
            ybar[i] = self.y[blk].mean()
            xbar[i] = self.X[blk].mean(axis=0)
        return ybar, xbar


def validate(dataset: Dataset) -> list[str]:
    """Check dataset invariants; returns one message per violation (empty = valid).

    Pure and idempotent: violations are data, not exceptions.
    """
    out: list[str] = []
    ds = dataset
    if ds.m < 2:
        out.append(f"dataset has m={ds.m} areas; at least 2 required")
    if len(set(ds.area_ids)) != ds.m:
        out.append("duplicate area_id in area list")
    for j in range(ds.n):
        if not ds.k[j] > 0:
            aid = ds.area_ids[ds.area_index[j]]
            out.append(f"unit {j} (area {aid!r}): variance multiplier k={ds.k[j]} must be > 0")
        if not np.all(np.isfinite(ds.X[j])) or not np.isfinite(ds.y[j]):
            aid = ds.area_ids[ds.area_index[j]]
            out.append(f"unit {j} (area {aid!r}): non-finite y or x")
    for i, aid in enumerate(ds.area_ids):
        if ds.N[i] == 0 and ds.starts[i + 1] - ds.starts[i] > 0:
            out.append(f"area {aid!r}: referenced by unit records but has no "
                       "area record")
            continue
        if ds.n_i[i] < 1:
            out.append(f"area {aid!r}: no unit records (n=0)")
        if ds.n_i[i] != ds.starts[i + 1] - ds.starts[i]:
            out.append(
                f"area {aid!r}: declared n={ds.n_i[i]} but {ds.starts[i+1]-ds.starts[i]} "
                "unit records found"
            )
        if ds.n_i[i] > ds.N[i]:
            out.append(f"area {aid!r}: sample size n={ds.n_i[i]} exceeds population N={ds.N[i]}")
        if not ds.h[i] > 0:
            out.append(f"area {aid!r}: variance multiplier h={ds.h[i]} must be > 0")
        if not np.all(np.isfinite(ds.Xbar[i])):
            out.append(f"area {aid!r}: non-finite covariate means")
    return out


@dataclass(frozen=True)
class ParamVector:
    """Per-area parameter bundle; intercept and area-effect variance are global."""

    beta0: float
    beta: tuple[float, ...]
    sigma2_gamma: float
    sigma2_eps: float
    tau: float = 0.5

    def __post_init__(self):
        if self.sigma2_gamma < 0 or self.sigma2_eps < 0:
            raise ValueError("variance components must be nonnegative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")


@dataclass
class FitResult:
    """Fitted parameters for all areas plus convergence information.

    Array fields mirror the per-area view in ``params``: ``betas`` is (m, p),
    ``sigma2_eps``, ``taus`` and ``alpha0`` are (m,); ``beta0`` and
    ``sigma2_gamma`` are shared across areas.
    """

    method: str
    beta0: float
    betas: np.ndarray
    sigma2_gamma: float
    sigma2_eps: np.ndarray
    taus: np.ndarray
    iterations: int
    converged: bool
    max_param_delta: float
    alpha0: np.ndarray | None = None
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.betas.shape[0]

    @property
    def params(self) -> list[ParamVector]:
        return [
            ParamVector(self.beta0, tuple(self.betas[i]), self.sigma2_gamma,
                        float(self.sigma2_eps[i]), float(self.taus[i]))
            for i in range(self.m)
        ]
