"""Dense matrix helpers and a deterministic one-sided Jacobi SVD.

Matrices are plain ``float64`` numpy arrays. Every public function here
returns finite arrays or raises; none of them mutate their inputs.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import NumericError, RankError, ShapeError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60

_counter = threading.local()


@contextlib.contextmanager
def count_flops() -> Iterator[list[int]]:
    """Count multiply-add FLOPs (2 per MAC) issued through :func:`matmul`.

    Yields a one-element list whose entry is updated in place. The counter is
    thread-local, so concurrent clients on other threads are not counted.
    """
    box = [0]
    prev = getattr(_counter, "box", None)
    _counter.box = box
    try:
        yield box
    finally:
        _counter.box = prev


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError(f"{name} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.isfinite(out).all():
        raise NumericError("matmul produced non-finite entries")
    box = getattr(_counter, "box", None)
    if box is not None:
        box[0] += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    return out


@dataclass(frozen=True)
class SvdResult:
    """Full SVD ``m = u @ diag(sigma) @ v.T``.

    ``u`` is rows x rows, ``v`` is cols x cols and ``sigma`` has
    ``min(rows, cols)`` entries in descending order.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        k = self.sigma.shape[0]
        return (self.u[:, :k] * self.sigma) @ self.v[:, :k].T


def _complete_basis(cols: list[np.ndarray | None], dim: int) -> list[np.ndarray]:
    # Fill the None slots with unit vectors orthogonal to everything accepted,
    # always picking the standard basis vector with the largest residual.
    basis = [c for c in cols if c is not None]
    out = list(cols)
    for slot, c in enumerate(out):
        if c is not None:
            continue
        q = np.array(basis) if basis else np.zeros((0, dim))
        resid = np.eye(dim)
        for _ in range(2):
            resid = resid - (resid @ q.T) @ q
        norms = np.linalg.norm(resid, axis=1)
        k = int(np.argmax(norms))
        vec = resid[k] / norms[k]
        out[slot] = vec
        basis.append(vec)
    return out


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n - 1 (or n, if odd) rounds of disjoint pairs."""
    players = list(range(n + (n % 2)))
    rounds = []
    for _ in range(len(players) - 1):
        half = len(players) // 2
        pairs = [(players[k], players[-1 - k]) for k in range(half)]
        pairs = [(min(p), max(p)) for p in pairs if max(p) < n]
        rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a rows >= cols matrix; returns unsorted pieces.

    Each sweep visits every column pair once in a fixed round-robin order;
    pairs within a round are disjoint and are rotated together.
    """
    rows, cols = a.shape
    # row i of ``w`` is column i of the working matrix; same for ``vt``
    w = a.T.copy()
    vt = np.eye(cols)
    schedule = _round_robin(cols)
    # columns this small are round-off; they end up in the null space anyway
    tiny = (np.finfo(np.float64).eps * np.linalg.norm(a) / math.sqrt(cols)) ** 2
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in schedule:
            if p.size == 0:
                continue
            wp, wq = w[p], w[q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            act = np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha) * np.sqrt(beta)
            act &= (alpha > tiny) & (beta > tiny)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            wp, wq = wp[act], wq[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            c_, s_ = c[:, None], s[:, None]
            w[p], w[q] = c_ * wp - s_ * wq, s_ * wp + c_ * wq
            vp, vq = vt[p], vt[q]
            vt[p], vt[q] = c_ * vp - s_ * vq, s_ * vp + c_ * vq
        if not rotated:
            break
    return w, np.linalg.norm(w, axis=1), vt.T.copy()


def svd(m) -> SvdResult:
    """Deterministic full SVD by cyclic one-sided Jacobi.

    Singular values are sorted descending with ties kept in original column
    order. Each left singular vector is signed so that its largest-magnitude
    entry is nonnegative; the matching right vector is flipped with it.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        raise ShapeError("svd of an empty matrix")
    transposed = rows < cols
    work = a.T if transposed else a
    n_rows, n_cols = work.shape

    w, norms, v = _jacobi_tall(work)
    order = sorted(range(n_cols), key=lambda j: (-norms[j], j))
    sigma = norms[order]
    v = v[:, order]
    w = w[order]

    smax = sigma[0] if n_cols else 0.0
    null_tol = max(n_rows, n_cols) * np.finfo(np.float64).eps * smax
    left: list[np.ndarray | None] = []
    for j in range(n_cols):
        if smax > 0.0 and sigma[j] > null_tol:
            left.append(w[j] / sigma[j])
        else:
            left.append(None)
    left.extend([None] * (n_rows - n_cols))
    u = np.column_stack(_complete_basis(left, n_rows))

    if transposed:
        u, v = v, u
    k = min(rows, cols)
    for j in range(u.shape[1]):
        idx = int(np.argmax(np.abs(u[:, j])))
        if u[idx, j] < 0.0:
            u[:, j] = -u[:, j]
            if j < k:
                v[:, j] = -v[:, j]
    return SvdResult(u=u, sigma=sigma.copy(), v=v)


def truncated_factors(m, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-``r`` factors ``(B, A)`` with ``B @ A`` the best rank-r approximation.

    ``B = U[:, :r] * sigma[:r]`` (rows x r) and ``A = V[:, :r].T`` (r x cols).
    """
    a = as_matrix(m)
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= min(a.shape):
        raise RankError(f"rank {r!r} outside [1, {min(a.shape)}] for shape {a.shape}")
    res = svd(a)
    b = res.u[:, :r] * res.sigma[:r]
    return b, res.v[:, :r].T.copy()
