"""Covariance functions, mean functions, and the output-correlation projection.

Every GP layer uses a noise-free ARD exponentiated-quadratic kernel, an
affine mean, and a fixed linear projection that correlates its independent
latent outputs.
"""
from __future__ import annotations

import math

import torch

from .errors import DimensionMismatch
from .numerics import DTYPE, as_tensor

POSITIVE_FLOOR = 1e-6


def positive(raw: torch.Tensor) -> torch.Tensor:
    """Softplus bijection onto (POSITIVE_FLOOR, inf)."""
    return torch.nn.functional.softplus(raw) + POSITIVE_FLOOR


def positive_inverse(value: torch.Tensor) -> torch.Tensor:
    """Raw parameter whose ``positive`` image is ``value``."""
    value = as_tensor(value)
    if bool((value <= POSITIVE_FLOOR).any()):
        raise ValueError(f"positive parameters must exceed the floor {POSITIVE_FLOOR}")
    x = value - POSITIVE_FLOOR
    # softplus^-1(x) = log(expm1(x)), stabilized for large x
    return torch.where(x > 30, x, torch.log(torch.expm1(x.clamp(max=30.0))))


class KernelParams:
    """ARD exponentiated-quadratic hyperparameters.

    ``variance`` is the kernel amplitude (equal to k(x, x) everywhere, since
    the kernel is noise free); ``lengthscales`` holds one scale per input
    dimension. Both live behind the softplus bijection so gradient steps
    cannot leave the positive cone.
    """

    def __init__(self, variance: float = 1.0, lengthscales=None, *, input_dim: int | None = None):
        if lengthscales is None:
            if input_dim is None:
                raise ValueError("give either lengthscales or input_dim")
            lengthscales = torch.full((input_dim,), math.sqrt(input_dim), dtype=DTYPE)
        lengthscales = as_tensor(lengthscales).reshape(-1)
        self.raw_variance = positive_inverse(torch.as_tensor(float(variance), dtype=DTYPE)).clone().requires_grad_(True)
        self.raw_lengthscales = positive_inverse(lengthscales).clone().requires_grad_(True)

    @property
    def variance(self) -> torch.Tensor:
        return positive(self.raw_variance)

    @property
    def lengthscales(self) -> torch.Tensor:
        return positive(self.raw_lengthscales)

    @property
    def input_dim(self) -> int:
        return self.raw_lengthscales.shape[0]

    def named_parameters(self):
        return [("kernel.raw_variance", self.raw_variance, True),
                ("kernel.raw_lengthscales", self.raw_lengthscales, True)]


def kernel_matrix(k: KernelParams, x: torch.Tensor, x2: torch.Tensor | None = None) -> torch.Tensor:
    """Dense covariance between the rows of ``x`` and ``x2`` (default ``x``)."""
    x = as_tensor(x)
    x2 = x if x2 is None else as_tensor(x2)
    if x.shape[-1] != k.input_dim or x2.shape[-1] != k.input_dim:
        raise DimensionMismatch(
            f"kernel expects {k.input_dim} input columns, got {x.shape[-1]} and {x2.shape[-1]}"
        )
    ell = k.lengthscales
    diff = x.unsqueeze(-2) / ell - x2.unsqueeze(-3) / ell
    return k.variance * torch.exp(-0.5 * diff.square().sum(-1))


def kernel_diag(k: KernelParams, x: torch.Tensor) -> torch.Tensor:
    """k(x, x) for each row: the constant kernel variance (noise-free kernel)."""
    x = as_tensor(x)
    if x.shape[-1] != k.input_dim:
        raise DimensionMismatch(
            f"kernel expects {k.input_dim} input columns, got {x.shape[-1]}"
        )
    return k.variance.expand(x.shape[:-1])


class LinearMean:
    """Affine mean function ``x -> W x + b``. Frozen during training."""

    def __init__(self, weight, bias=None, trainable: bool = False):
        self.weight = as_tensor(weight).clone()
        if self.weight.ndim != 2:
            raise DimensionMismatch("LinearMean weight must be 2-D (out_dim x in_dim)")
        if bias is None:
            bias = torch.zeros(self.weight.shape[0], dtype=DTYPE)
        self.bias = as_tensor(bias).clone().reshape(-1)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionMismatch("LinearMean bias length must match output dim")
        self.trainable = trainable
        self.weight.requires_grad_(trainable)
        self.bias.requires_grad_(trainable)

    @classmethod
    def identity(cls, dim: int) -> "LinearMean":
        return cls(torch.eye(dim, dtype=DTYPE))

    @classmethod
    def zero(cls, out_dim: int, in_dim: int) -> "LinearMean":
        return cls(torch.zeros(out_dim, in_dim, dtype=DTYPE))

    def named_parameters(self):
        return [("mean.weight", self.weight, self.trainable),
                ("mean.bias", self.bias, self.trainable)]


def mean_eval(m: LinearMean, x: torch.Tensor) -> torch.Tensor:
    """Row-wise affine map; accepts any leading batch shape."""
    x = as_tensor(x)
    if x.shape[-1] != m.weight.shape[1]:
        raise DimensionMismatch(
            f"mean expects {m.weight.shape[1]} input columns, got {x.shape[-1]}"
        )
    return x @ m.weight.mT + m.bias


class OutputProjection:
    """Fixed linear map from E independent latent GPs to the layer outputs.

    The induced covariance between outputs d, d' is sum_e P_de k(x,x') P_d'e,
    which stays PSD for any PSD k. Never optimized.
    """

    def __init__(self, p):
        self.p = as_tensor(p).clone()
        if self.p.ndim != 2:
            raise DimensionMismatch("projection must be 2-D (out_dim x n_latent)")
        self.p.requires_grad_(False)

    @classmethod
    def identity(cls, dim: int) -> "OutputProjection":
        return cls(torch.eye(dim, dtype=DTYPE))

    @property
    def out_dim(self) -> int:
        return self.p.shape[0]

    @property
    def n_latent(self) -> int:
        return self.p.shape[1]

    def named_parameters(self):
        return [("projection.p", self.p, False)]


def first_principal_direction(h: torch.Tensor) -> torch.Tensor:
    """Unit vector along the leading principal component of ``h`` rows."""
    h = as_tensor(h)
    centered = h - h.mean(0, keepdim=True)
    _, _, vt = torch.linalg.svd(centered, full_matrices=True)
    direction = vt[0]
    lead = direction[direction.abs().argmax()]
    return direction if lead >= 0 else -direction


def pca_projection(h: torch.Tensor, out_dim: int, n_latent: int) -> torch.Tensor:
    """Projection initialized to leading principal directions of ``h``.

    Columns beyond the available rank are padded with identity-pattern unit
    vectors so the projection always has full column count.
    """
    h = as_tensor(h)
    centered = h - h.mean(0, keepdim=True)
    # SVD of the centered data: right singular vectors = principal directions.
    _, _, vt = torch.linalg.svd(centered, full_matrices=True)
    directions = vt.mT  # (D, D), columns ordered by singular value
    p = torch.zeros(out_dim, n_latent, dtype=DTYPE)
    d = h.shape[1]
    for j in range(n_latent):
        if j < min(d, out_dim):
            col = directions[:out_dim, j]
            # fix the sign so initialization does not depend on SVD conventions
            lead = col[col.abs().argmax()]
            p[:, j] = col if lead >= 0 else -col
        else:
            p[j % out_dim, j] = 1.0
    return p
