"""Deterministic linear algebra and counter-based random streams.

Everything here is pure: factorizations depend only on their matrix input,
and random draws depend only on (seed, stream key, counter position). That
purity is what makes per-datapoint objective terms reproducible and
order-independent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.special import ndtri

from .errors import NotPositiveDefinite, SingularTriangular

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    """Coerce array-likes to a float64 tensor without copying tensors."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


# ---------------------------------------------------------------------------
# Cholesky with jitter escalation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JitterPolicy:
    """Escalation schedule for diagonal jitter, relative to the mean diagonal.

    Jitter 0 is always tried first; afterwards ``initial * mean_diag`` is
    scaled by ``factor`` until ``maximum * mean_diag`` is exceeded.
    """

    initial: float = 1e-8
    factor: float = 10.0
    maximum: float = 1e-4

    def levels(self, scale: float) -> list[float]:
        out = [0.0]
        level = self.initial
        while level <= self.maximum * (1 + 1e-12):
            out.append(level * scale)
            level *= self.factor
        return out


DEFAULT_JITTER = JitterPolicy()


def cholesky_psd(a: torch.Tensor, policy: JitterPolicy = DEFAULT_JITTER):
    """Lower Cholesky factor of ``a + jitter * I`` with escalating jitter.

    ``a`` may carry leading batch dimensions; a single jitter level (the
    smallest that factorizes every matrix in the batch) is used for all of
    them. Returns ``(L, jitter)``.

    Raises NotPositiveDefinite when the maximum jitter level still fails,
    which signals a degenerate kernel matrix or invalid parameters.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {tuple(a.shape)}")
    n = a.shape[-1]
    diag_mean = float(a.diagonal(dim1=-2, dim2=-1).mean().detach())
    scale = diag_mean if diag_mean > 0 else 1.0
    eye = torch.eye(n, dtype=a.dtype)
    with torch.no_grad():
        chosen = None
        for jitter in policy.levels(scale):
            _, info = torch.linalg.cholesky_ex(a + jitter * eye)
            if int(info.max()) == 0:
                chosen = jitter
                break
    if chosen is None:
        raise NotPositiveDefinite(
            f"cholesky failed for {n}x{n} matrix at maximum jitter "
            f"{policy.maximum * scale:g}"
        )
    # Recompute at the chosen level so gradients flow through the factor.
    return torch.linalg.cholesky(a + chosen * eye), chosen


def tri_solve(l: torch.Tensor, b: torch.Tensor, transposed: bool = False) -> torch.Tensor:
    """Solve ``l x = b`` (or ``l^T x = b``) for lower-triangular ``l``."""
    l = as_tensor(l)
    b = as_tensor(b)
    diag = l.diagonal(dim1=-2, dim2=-1)
    if bool((diag <= 0).any()):
        raise SingularTriangular("triangular factor has a non-positive diagonal entry")
    vector = b.ndim == l.ndim - 1
    if vector:
        b = b.unsqueeze(-1)
    if transposed:
        x = torch.linalg.solve_triangular(l.mT, b, upper=True)
    else:
        x = torch.linalg.solve_triangular(l, b, upper=False)
    return x.squeeze(-1) if vector else x


def log_sum_exp(values: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """log(sum(exp(values))) along ``dim`` with max-subtraction stabilization."""
    values = as_tensor(values)
    if values.shape[dim] == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = values.max(dim=dim, keepdim=True).values
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    return (m + (values - m).exp().sum(dim=dim, keepdim=True).log()).squeeze(dim)


# ---------------------------------------------------------------------------
# Counter-based random streams (Philox4x32-10)
# ---------------------------------------------------------------------------
#
# A draw is addressed by a 64-bit key (hashed from (seed, stream key)) and a
# 128-bit counter. Identical addresses give identical doubles; distinct
# addresses give independent ones. This is what lets every (step, datapoint,
# sample, layer) combination own its noise regardless of batch composition
# or evaluation order.

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = 0x9E3779B9
_PHILOX_W1 = 0xBB67AE85

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """One step of SplitMix64; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def fold_key(seed: int, parts: Sequence[int]) -> int:
    """Hash (seed, key parts) into a 64-bit Philox key."""
    state = seed & _MASK64
    out = 0
    state, out = _splitmix64(state)
    for p in parts:
        state = (state ^ (int(p) & _MASK64)) & _MASK64
        state, out = _splitmix64(state)
    return out


def _philox_4x32(c0, c1, c2, c3, key64: int):
    """Ten Philox4x32 rounds over uint32 counter arrays; returns 4 lanes."""
    k0 = key64 & 0xFFFFFFFF
    k1 = (key64 >> 32) & 0xFFFFFFFF
    for _ in range(10):
        p0 = c0.astype(np.uint64) * _PHILOX_M0
        p1 = c2.astype(np.uint64) * _PHILOX_M1
        hi0 = (p0 >> np.uint64(32)).astype(np.uint32)
        lo0 = p0.astype(np.uint32)
        hi1 = (p1 >> np.uint64(32)).astype(np.uint32)
        lo1 = p1.astype(np.uint32)
        c0, c1, c2, c3 = hi1 ^ c1 ^ np.uint32(k0), lo1, hi0 ^ c3 ^ np.uint32(k1), lo0
        k0 = (k0 + _PHILOX_W0) & 0xFFFFFFFF
        k1 = (k1 + _PHILOX_W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def _normals_at(key64: int, c0: np.ndarray, c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    """One standard-normal double per counter position (c0, c1, c2)."""
    shape = np.broadcast_shapes(c0.shape, c1.shape, c2.shape)
    c0 = np.broadcast_to(c0, shape).astype(np.uint32)
    c1 = np.broadcast_to(c1, shape).astype(np.uint32)
    c2 = np.broadcast_to(c2, shape).astype(np.uint32)
    c3 = np.zeros(shape, dtype=np.uint32)
    o0, o1, _, _ = _philox_4x32(c0, c1, c2, c3, key64)
    # 53 uniform bits -> (0, 1) strictly -> inverse normal CDF.
    hi = (o0 >> np.uint32(6)).astype(np.float64)  # 26 bits
    lo = (o1 >> np.uint32(5)).astype(np.float64)  # 27 bits
    u = (hi * 134217728.0 + lo + 0.5) * (1.0 / 9007199254740992.0)
    return ndtri(u)


@dataclass(frozen=True)
class RngStream:
    """A deterministic noise stream addressed by (seed, key tuple).

    Streams never carry state: the n-th draw of a stream is a pure function
    of the seed, the key, and n. ``child`` derives an independent stream.
    """

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *parts: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(p) for p in parts))

    def _key64(self) -> int:
        return fold_key(self.seed, self.key)

    def normal(self, *shape: int) -> torch.Tensor:
        """Standard-normal tensor; entry i uses counter position i."""
        n = int(np.prod(shape)) if shape else 1
        idx = np.arange(n, dtype=np.uint64)
        z = _normals_at(
            self._key64(),
            (idx & np.uint64(0xFFFFFFFF)).astype(np.uint32),
            (idx >> np.uint64(32)).astype(np.uint32),
            np.zeros(n, dtype=np.uint32),
        )
        return torch.from_numpy(z.reshape(shape) if shape else z[0].reshape(()))

    def numpy_generator(self) -> np.random.Generator:
        """Seeded numpy Generator for shuffles and k-means initialization."""
        return np.random.Generator(np.random.Philox(key=self._key64()))


def draw_standard_normal(stream: RngStream, count: int) -> torch.Tensor:
    """``count`` standard-normal draws, deterministic given the stream."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return stream.normal(count)


def indexed_normals(stream: RngStream, row_keys: np.ndarray, n_cols: int, n_dims: int) -> torch.Tensor:
    """Normal draws of shape (len(row_keys), n_cols, n_dims).

    The draw at position (i, k, d) depends on ``row_keys[i]`` rather than i,
    so a datapoint keeps its noise no matter where it lands in a batch.
    """
    rows = np.asarray(row_keys, dtype=np.uint64)
    c0 = (rows & np.uint64(0xFFFFFFFF)).astype(np.uint32)[:, None, None]
    c1 = np.arange(n_cols, dtype=np.uint32)[None, :, None]
    c2 = np.arange(n_dims, dtype=np.uint32)[None, None, :]
    return torch.from_numpy(_normals_at(stream._key64(), c0, c1, c2))
