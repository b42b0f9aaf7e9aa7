"""Small dense linear algebra and seeded sampling.

Everything here works on plain numpy arrays. Matrices are at most a few
dozen rows, so the symmetric eigensolver is a cyclic Jacobi iteration
rather than a LAPACK call: it is deterministic, accurate to machine
precision at this size, and has no platform-dependent ordering quirks.
"""

from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np

from .errors import BadDimension, NonFiniteInput, NotPD

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def derive_seed(parent_seed: int, label: str) -> int:
    """Child seed: FNV-1a of the label bytes, xor'ed with the parent seed, times the FNV prime."""
    h = fnv1a64(str(label).encode("utf-8"))
    return ((h ^ (parent_seed & _MASK64)) * _FNV_PRIME) & _MASK64


class RngStream:
    """Seeded random stream addressed by a hierarchical path.

    ``RngStream(7).child("client", 3, "phase", 5)`` always produces the same
    draws, independent of what other streams have been used. A stream is
    single-owner; derive a child per thread instead of sharing one.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)
        self._gen: np.random.Generator | None = None

    def child(self, *labels) -> "RngStream":
        seed = self.seed
        for label in labels:
            seed = derive_seed(seed, str(label))
        return RngStream(seed, self.path + tuple(str(label) for label in labels))

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.PCG64(self.seed))
        return self._gen

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path)!r})"


RngLike = Union[RngStream, np.random.Generator]


def _gen(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.gen
    return rng


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("NonFiniteInput: array contains NaN or inf")


# ---------------------------------------------------------------------------
# symmetric eigenproblems


def sym_eig(A, max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.

    Cyclic Jacobi: sweep over every off-diagonal pair, annihilating it with a
    plane rotation, until the off-diagonal mass is below roundoff.
    """
    a = np.array(A, dtype=float)
    _check_finite(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise BadDimension(f"BadDimension: expected a square matrix, got shape {a.shape}")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.sum(a * a)
    for _ in range(max_sweeps):
        off = np.sum(np.triu(a, 1) ** 2)
        if off <= 1e-32 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(diff) > 1e150 * abs(apq):
                    # theta would overflow; tan of the rotation angle is ~ apq / diff
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def min_eigenvalue(V) -> float:
    w, _ = sym_eig(V)
    return float(w[0])


def pinv_solve(V, Y, rtol: float = 1e-10) -> np.ndarray:
    """Return V^+ Y, dropping eigen-directions with eigenvalue <= rtol * lambda_max."""
    if rtol <= 0:
        raise ValueError("rtol must be positive")
    Y = np.asarray(Y, dtype=float)
    _check_finite(Y)
    w, Q = sym_eig(V)
    lam_max = w[-1] if w.size else 0.0
    keep = w > rtol * lam_max
    if lam_max <= 0.0 or not np.any(keep):
        return np.zeros_like(Y)
    Qk = Q[:, keep]
    return Qk @ ((Qk.T @ Y) / w[keep])


def mahalanobis_inv_norm(x, A) -> np.ndarray | float:
    """sqrt(x^T A^{-1} x) via a Cholesky solve. ``x`` may be a stack of row vectors."""
    A = np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_finite(A, x)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPD("NotPD: matrix is not positive definite") from exc
    z = np.linalg.solve(L, x.T)
    out = np.sqrt(np.sum(z * z, axis=0))
    return float(out) if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# randomized Hadamard rotation


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    return 1 << max(0, (int(n) - 1).bit_length())


def fwht(x) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform (Sylvester order) along the last axis."""
    x = np.array(x, dtype=float)
    d = x.shape[-1]
    if not is_power_of_two(d):
        raise BadDimension(f"BadDimension: {d} is not a power of two")
    lead = x.shape[:-1]
    h = 1
    while h < d:
        x = x.reshape(lead + (d // (2 * h), 2, h))
        top = x[..., 0, :]
        bot = x[..., 1, :]
        x = np.stack((top + bot, top - bot), axis=-2)
        h *= 2
    return x.reshape(lead + (d,))


def hadamard_rotate(x, signs, inverse: bool = False) -> np.ndarray:
    """Apply U = H D / sqrt(d) (or U^T when ``inverse``) along the last axis of ``x``."""
    x = np.asarray(x, dtype=float)
    signs = np.asarray(signs, dtype=float)
    d = x.shape[-1]
    if not is_power_of_two(d):
        raise BadDimension(f"BadDimension: {d} is not a power of two")
    if signs.shape != (d,) or not np.all(np.abs(signs) == 1.0):
        raise ValueError("signs must be a vector of +1/-1 entries matching the dimension")
    _check_finite(x)
    if inverse:
        return signs * fwht(x) / math.sqrt(d)
    return fwht(signs * x) / math.sqrt(d)


# ---------------------------------------------------------------------------
# samplers


def sample_gaussian(rng: RngLike, mean: float = 0.0, sd: float = 1.0, size=None):
    if sd <= 0:
        raise ValueError("sd must be positive")
    return _gen(rng).normal(mean, sd, size=size)


def sample_laplace(rng: RngLike, scale: float, size=None):
    if not scale > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    return _gen(rng).laplace(0.0, scale, size=size)


def sample_rademacher(rng: RngLike, dim: int) -> np.ndarray:
    return _gen(rng).integers(0, 2, size=dim) * 2.0 - 1.0


def sample_uniform_sphere(rng: RngLike, dim: int, radius: float = 1.0, size=None):
    """Uniform draws on the sphere of the given radius (shape ``size + (dim,)``)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (dim,)
    g = _gen(rng).standard_normal(shape)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    while np.any(norms == 0.0):  # probability zero, but keep the contract exact
        bad = norms[..., 0] == 0.0
        g[bad] = _gen(rng).standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return radius * g / norms


def sample_uniform_ball(rng: RngLike, dim: int, radius: float = 1.0, size=None):
    if radius <= 0:
        raise ValueError("radius must be positive")
    shape = () if size is None else tuple(np.atleast_1d(size))
    directions = sample_uniform_sphere(rng, dim, 1.0, size=size)
    u = _gen(rng).random(shape)
    return radius * directions * (u ** (1.0 / dim))[..., None]


def sample_truncated_gaussian_ball(rng: RngLike, dim: int, radius: float = 1.0, size=None):
    """N(0, I) conditioned on ||x|| <= radius, by rejection."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    g = _gen(rng)
    n = 1 if size is None else int(np.prod(size))
    out = np.empty((n, dim))
    filled = 0
    while filled < n:
        need = n - filled
        batch = g.standard_normal((max(16, int(need * 2.7) + 8), dim))
        ok = batch[np.sum(batch * batch, axis=1) <= radius * radius]
        take = min(need, ok.shape[0])
        out[filled : filled + take] = ok[:take]
        filled += take
    if size is None:
        return out[0]
    return out.reshape(tuple(np.atleast_1d(size)) + (dim,))


def sample_categorical_logweights(rng: RngLike, logw: Sequence[float], size=None):
    """Index drawn with probability proportional to exp(logw), shifted by the max for stability."""
    logw = np.asarray(logw, dtype=float)
    if logw.ndim != 1 or logw.size == 0:
        raise ValueError("logw must be a nonempty vector")
    _check_finite(logw)
    w = np.exp(logw - logw.max())
    p = w / w.sum()
    return _gen(rng).choice(logw.size, size=size, p=p)
