"""Streaming Monte-Carlo covariance estimation and covariance diagnostics.

The estimator is the plain second moment C ~ (1/N) sum u u^T of the
post-burn-in states.  Accumulators are mergeable: merging two equals
accumulating the concatenated sample sets (exactly, up to float summation
order).  Dense accumulation is capped near 4e3 DOFs (N^2 memory); larger
runs use the diagonal/row-subset accumulator.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CovarianceAccumulator",
    "RowSubsetAccumulator",
    "LagCovarianceAccumulator",
    "relative_frobenius_error",
    "mass_identity_deviation",
    "row_correlation",
]

DENSE_DOF_CAP = 4096


class CovarianceAccumulator:
    """Running sum of outer products (and of states) for dense covariance."""

    def __init__(self, n_dof: int, cap: int = DENSE_DOF_CAP):
        if n_dof > cap:
            raise ValueError(
                f"dense covariance accumulation capped at {cap} DOFs (got {n_dof}); "
                "use RowSubsetAccumulator for larger runs")
        self.n_dof = n_dof
        self.count = 0
        self.sum_outer = np.zeros((n_dof, n_dof))
        self.sum_state = np.zeros(n_dof)

    def accumulate(self, u: np.ndarray) -> "CovarianceAccumulator":
        """Add a single sample."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_dof,):
            raise ValueError(f"sample shape {u.shape} != ({self.n_dof},)")
        self.sum_outer += np.outer(u, u)
        self.sum_state += u
        self.count += 1
        return self

    def observe_block(self, step_indices, states: np.ndarray) -> None:
        states = np.asarray(states, dtype=float)
        if states.shape[1] != self.n_dof:
            raise ValueError(f"block width {states.shape[1]} != {self.n_dof}")
        self.sum_outer += states.T @ states
        self.sum_state += states.sum(axis=0)
        self.count += states.shape[0]

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        if other.n_dof != self.n_dof:
            raise ValueError("cannot merge accumulators of different sizes")
        self.sum_outer += other.sum_outer
        self.sum_state += other.sum_state
        self.count += other.count
        return self

    def second_moment(self) -> np.ndarray:
        """The estimator (1/N) sum u u^T."""
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.sum_outer / self.count

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.sum_state / self.count

    def copy(self) -> "CovarianceAccumulator":
        out = CovarianceAccumulator(self.n_dof)
        out.count = self.count
        out.sum_outer = self.sum_outer.copy()
        out.sum_state = self.sum_state.copy()
        return out


class RowSubsetAccumulator:
    """Diagonal plus selected rows of the second moment (for large N)."""

    def __init__(self, n_dof: int, rows: Sequence[int]):
        self.n_dof = n_dof
        self.rows = np.asarray(sorted(set(int(r) for r in rows)), dtype=np.int64)
        if self.rows.size and (self.rows[0] < 0 or self.rows[-1] >= n_dof):
            raise ValueError("row index out of range")
        self.count = 0
        self.sum_diag = np.zeros(n_dof)
        self.sum_rows = np.zeros((self.rows.size, n_dof))

    def observe_block(self, step_indices, states: np.ndarray) -> None:
        states = np.asarray(states, dtype=float)
        self.sum_diag += np.sum(states * states, axis=0)
        if self.rows.size:
            self.sum_rows += states[:, self.rows].T @ states
        self.count += states.shape[0]

    def diagonal(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.sum_diag / self.count

    def row(self, dof: int) -> np.ndarray:
        where = np.where(self.rows == dof)[0]
        if where.size == 0:
            raise KeyError(f"row {dof} was not tracked")
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.sum_rows[where[0]] / self.count


class LagCovarianceAccumulator:
    """Empirical lag-k second moments E[u_{n+k} u_n^T] of a streamed chain."""

    def __init__(self, n_dof: int, lags: Iterable[int]):
        self.n_dof = n_dof
        self.lags = sorted(set(int(k) for k in lags))
        if self.lags and self.lags[0] < 0:
            raise ValueError("lags must be nonnegative")
        self.max_lag = self.lags[-1] if self.lags else 0
        self.sums = {k: np.zeros((n_dof, n_dof)) for k in self.lags}
        self.counts = {k: 0 for k in self.lags}
        self._tail = np.zeros((0, n_dof))

    def observe_block(self, step_indices, states: np.ndarray) -> None:
        joined = np.vstack([self._tail, states]) if self._tail.size else np.asarray(states)
        offset = joined.shape[0] - states.shape[0]
        for k in self.lags:
            start = max(offset, k)  # leads must be new states with a valid lag partner
            lead = joined[start:]
            if lead.shape[0] > 0:
                lag = joined[start - k: joined.shape[0] - k]
                self.sums[k] += lead.T @ lag
                self.counts[k] += lead.shape[0]
        keep = min(self.max_lag, joined.shape[0])
        self._tail = joined[joined.shape[0] - keep:].copy() if keep else joined[:0]

    def lag_moment(self, k: int) -> np.ndarray:
        if self.counts.get(k, 0) == 0:
            raise ValueError(f"no pairs accumulated at lag {k}")
        return self.sums[k] / self.counts[k]


def relative_frobenius_error(c_emp: np.ndarray, c_target: np.ndarray) -> float:
    """|| C_emp - C_target ||_F / || C_target ||_F."""
    c_emp = np.asarray(c_emp, dtype=float)
    c_target = np.asarray(c_target, dtype=float)
    if c_emp.shape != c_target.shape:
        raise ValueError(f"shape mismatch {c_emp.shape} vs {c_target.shape}")
    denom = np.linalg.norm(c_target)
    if denom == 0.0:
        raise ValueError("zero-norm target")
    return float(np.linalg.norm(c_emp - c_target) / denom)


def mass_identity_deviation(mass_dense: np.ndarray, c_emp: np.ndarray):
    """(M @ C_emp, || M C_emp - I ||_F / || I ||_F): delta-correlation check."""
    mass_dense = np.asarray(mass_dense, dtype=float)
    c_emp = np.asarray(c_emp, dtype=float)
    prod = mass_dense @ c_emp
    n = prod.shape[0]
    dev = float(np.linalg.norm(prod - np.eye(n)) / np.sqrt(n))
    return prod, dev


def row_correlation(c_emp: np.ndarray, mass_dense: np.ndarray, dof_index: int) -> np.ndarray:
    """Row dof_index of M @ C_emp: correlation of one DOF against all others."""
    c_emp = np.asarray(c_emp, dtype=float)
    n = c_emp.shape[0]
    if not (0 <= dof_index < n):
        raise IndexError(f"dof index {dof_index} out of range [0, {n})")
    return np.asarray(mass_dense, dtype=float)[dof_index] @ c_emp
