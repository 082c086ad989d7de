"""Dense matrix algebra shared by every adapter variant.

Matrices are plain 2-D ``numpy.float64`` arrays.  The helpers here add the
checks and conventions the rest of the package relies on: a deterministic SVD
sign convention, a fixed numerical-rank threshold, and seeded random streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RANK_RTOL = 1e-8


class LinalgError(ValueError):
    """Raised for shape errors, rank deficiency and failed decompositions."""


def as_mat(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise LinalgError(f"{name} has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_mat(a, "a"), as_mat(b, "b")
    if a.shape[1] != b.shape[0]:
        raise LinalgError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def hadamard(a, b) -> np.ndarray:
    a, b = as_mat(a, "a"), as_mat(b, "b")
    if a.shape != b.shape:
        raise LinalgError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def kronecker(a, b) -> np.ndarray:
    return np.kron(as_mat(a, "a"), as_mat(b, "b"))


def block_diag(blocks) -> np.ndarray:
    blocks = [as_mat(b, "block") for b in blocks]
    if not blocks:
        raise LinalgError("block_diag needs at least one block")
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``M = U @ diag(S) @ V.T``."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def truncated(self, r: int) -> np.ndarray:
        return (self.U[:, :r] * self.S[:r]) @ self.V[:, :r].T


def svd(m) -> SvdResult:
    """Thin SVD with descending singular values.

    Each column of ``U`` is flipped so its largest-magnitude entry is
    non-negative (first such entry on ties); ``V`` is flipped to match.
    """
    m = as_mat(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise LinalgError(f"SVD did not converge: {exc}") from exc
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return SvdResult(U=u * signs, S=s, V=vt.T * signs)


def numerical_rank(m, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(as_mat(m), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def qr(m, complete: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """QR with non-negative diagonal on ``R``.

    The reduced form needs ``rows >= cols``; pass ``complete=True`` for the
    full ``m x m`` factor otherwise.
    """
    m = as_mat(m)
    if not complete and m.shape[0] < m.shape[1]:
        raise LinalgError("reduced QR needs rows >= cols; use complete=True")
    q, r = np.linalg.qr(m, mode="complete" if complete else "reduced")
    k = min(r.shape)
    d = np.sign(np.diag(r)[:k])
    d[d == 0] = 1.0
    q[:, :k] *= d
    r[:k, :] *= d[:, None]
    return q, r


def pinv_left(a, rcond: float = 1e-10) -> np.ndarray:
    """Left inverse ``(A^T A)^{-1} A^T`` of a full-column-rank matrix."""
    a = as_mat(a)
    s = np.linalg.svd(a, compute_uv=False)
    if a.shape[0] < a.shape[1] or s[-1] <= rcond * s[0]:
        raise LinalgError("pinv_left needs full column rank")
    return np.linalg.solve(a.T @ a, a.T)


def solve_sylvester(p, q, c) -> np.ndarray:
    """Solve ``M @ q + p @ M = c`` by dense vectorization.

    With column-major ``vec``, the system is ``(I kron p + q^T kron I) vec(M)
    = vec(c)``.  Fine for the r <= 64 sizes used here.
    """
    p, q, c = as_mat(p, "p"), as_mat(q, "q"), as_mat(c, "c")
    r = p.shape[0]
    if p.shape != (r, r) or q.shape != (r, r) or c.shape != (r, r):
        raise LinalgError("solve_sylvester expects square r x r operands")
    eye = np.eye(r)
    big = np.kron(eye, p) + np.kron(q.T, eye)
    rhs = c.reshape(-1, order="F")
    if np.linalg.cond(big) > 1e13:
        raise LinalgError("Sylvester system is singular (p and -q share eigenvalues)")
    vec = np.linalg.solve(big, rhs)
    return vec.reshape((r, r), order="F")


@dataclass
class RngStream:
    """Seeded PCG64 stream; the counter tracks how many values were drawn."""

    seed: int
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, shape) -> np.ndarray:
        out = self._gen.uniform(low, high, size=shape)
        self.counter += out.size
        return out

    def normal(self, std, shape) -> np.ndarray:
        out = self._gen.normal(0.0, std, size=shape)
        self.counter += out.size
        return out

    def integers(self, low, high, shape) -> np.ndarray:
        out = self._gen.integers(low, high, size=shape)
        self.counter += np.size(out)
        return out

    def permutation(self, n: int) -> np.ndarray:
        out = self._gen.permutation(n)
        self.counter += n
        return out

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream keyed by ``key``; the parent is untouched."""
        child_seed = np.random.SeedSequence(self.seed, spawn_key=(key,)).generate_state(1, np.uint64)[0]
        return RngStream(int(child_seed))


def kaiming_uniform(rows: int, cols: int, fan_in: int, rng: RngStream) -> np.ndarray:
    if fan_in <= 0:
        raise LinalgError("fan_in must be positive")
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (rows, cols))


def gaussian(rows: int, cols: int, std: float, rng: RngStream) -> np.ndarray:
    return rng.normal(std, (rows, cols))


def spectral_norm(m) -> float:
    return float(np.linalg.norm(as_mat(m), 2))
