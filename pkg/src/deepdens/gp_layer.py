"""Sparse variational GP layer: marginals, sampling, and its KL term.

A layer owns E independent latent GPs sharing one kernel, each with a
Gaussian variational distribution N(m_e, S_e) over its function values at
the inducing inputs Z. The layer output projects the latents through a
fixed matrix P and adds a fixed affine mean.

Posterior marginals at a point x follow the standard sparse-GP identities:

    mu_e(x)     = k(x)^T Ktilde^-1 m_e
    sigma2_e(x) = k(x,x) - k(x)^T Ktilde^-1 (Ktilde - S_e) Ktilde^-1 k(x)

The importance-weighted objective additionally needs joint draws over the K
importance copies of one datapoint, which is what the correlated sampler
provides (O(K^3) per datapoint per latent output).
"""
from __future__ import annotations

import torch

from .errors import DimensionMismatch, NotPositiveDefinite
from .kernels import (
    KernelParams,
    LinearMean,
    OutputProjection,
    kernel_diag,
    kernel_matrix,
    mean_eval,
    positive,
    positive_inverse,
)
from .numerics import DTYPE, as_tensor, cholesky_psd, tri_solve

# Marginal variances may dip slightly below zero from roundoff near inducing
# points; anything worse than this signals inconsistent parameters.
VARIANCE_TOLERANCE = -1e-10


class InducingSet:
    """Inducing input locations Z, fixed in shape after construction."""

    def __init__(self, z, trainable: bool = False):
        z = as_tensor(z).clone()
        if z.ndim != 2 or z.shape[0] < 1:
            raise DimensionMismatch("inducing inputs must be a non-empty 2-D matrix")
        if z.shape[0] > 1:
            dist = torch.cdist(z, z)
            dist.fill_diagonal_(float("inf"))
            if float(dist.min()) <= 1e-10:
                raise ValueError("duplicate inducing inputs (pairwise distance <= 1e-10)")
        self.z = z
        self.trainable = trainable
        self.z.requires_grad_(trainable)

    @property
    def count(self) -> int:
        return self.z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.z.shape[1]

    def named_parameters(self):
        return [("inducing.z", self.z, self.trainable)]


class GaussianVariationalU:
    """Gaussian q over inducing outputs, one (m_e, S_e) per latent output.

    Parameterized by the mean and the square root of the covariance; the
    square-root diagonal lives behind the softplus bijection so S stays PD
    under unconstrained gradient steps.
    """

    def __init__(self, n_inducing: int, n_latent: int, init_sqrt_scale: float = 1.0):
        self.mean = torch.zeros(n_inducing, n_latent, dtype=DTYPE, requires_grad=True)
        raw = torch.zeros(n_latent, n_inducing, n_inducing, dtype=DTYPE)
        diag_raw = positive_inverse(torch.as_tensor(init_sqrt_scale, dtype=DTYPE))
        raw[:, range(n_inducing), range(n_inducing)] = diag_raw
        self.raw_sqrt = raw.requires_grad_(True)

    @property
    def n_inducing(self) -> int:
        return self.mean.shape[0]

    @property
    def n_latent(self) -> int:
        return self.mean.shape[1]

    def sqrt(self) -> torch.Tensor:
        """Lower-triangular factors (E, M, M) with positive diagonals."""
        lower = self.raw_sqrt.tril(-1)
        diag = positive(self.raw_sqrt.diagonal(dim1=-2, dim2=-1))
        return lower + torch.diag_embed(diag)

    def cov(self) -> torch.Tensor:
        """Full covariances S_e = L_e L_e^T, shape (E, M, M)."""
        ell = self.sqrt()
        return ell @ ell.mT

    def set(self, mean: torch.Tensor, sqrt_factors: torch.Tensor) -> None:
        """Overwrite (m, L) in place; factors must have positive diagonals."""
        with torch.no_grad():
            self.mean.copy_(as_tensor(mean))
            lower = as_tensor(sqrt_factors)
            raw = lower.tril(-1) + torch.diag_embed(
                positive_inverse(lower.diagonal(dim1=-2, dim2=-1))
            )
            self.raw_sqrt.copy_(raw)

    def named_parameters(self):
        return [("qu.mean", self.mean, True), ("qu.raw_sqrt", self.raw_sqrt, True)]


class GpLayer:
    """One sparse variational GP layer of the stack."""

    def __init__(self, kernel: KernelParams, inducing: InducingSet,
                 qu: GaussianVariationalU, mean: LinearMean,
                 projection: OutputProjection):
        if inducing.input_dim != kernel.input_dim:
            raise DimensionMismatch("inducing input dim must match kernel lengthscale count")
        if qu.n_latent != projection.n_latent:
            raise DimensionMismatch("projection must conform to the latent output count")
        if mean.weight.shape != (projection.out_dim, inducing.input_dim):
            raise DimensionMismatch("mean function must map layer input dim to output dim")
        self.kernel = kernel
        self.inducing = inducing
        self.qu = qu
        self.mean = mean
        self.projection = projection

    @property
    def input_dim(self) -> int:
        return self.inducing.input_dim

    @property
    def out_dim(self) -> int:
        return self.projection.out_dim

    @property
    def n_latent(self) -> int:
        return self.qu.n_latent

    def named_parameters(self):
        out = []
        for part in (self.kernel, self.inducing, self.qu, self.mean, self.projection):
            out.extend(part.named_parameters())
        return out


def _qu_moments(layer: GpLayer, qu_override=None):
    """(mean (M,E), cov (E,M,M) or None, sqrt (E,M,M) or None)."""
    if qu_override is not None:
        m, s = qu_override
        return as_tensor(m), as_tensor(s), None
    return layer.qu.mean, None, layer.qu.sqrt()


def latent_marginal(layer: GpLayer, x: torch.Tensor, qu_override=None):
    """Per-latent posterior marginals before projection.

    Returns (mu (..., E), var (..., E)); ``x`` may carry batch dimensions.
    """
    x = as_tensor(x)
    flat = x.reshape(-1, x.shape[-1])
    m, s_full, s_sqrt = _qu_moments(layer, qu_override)
    kzz = kernel_matrix(layer.kernel, layer.inducing.z)
    l, _ = cholesky_psd(kzz)
    kzx = kernel_matrix(layer.kernel, layer.inducing.z, flat)  # (M, N)
    a = tri_solve(l, kzx)                       # L^-1 Kzx
    b = tri_solve(l, a, transposed=True)        # Ktilde^-1 Kzx
    mu = b.mT @ m                               # (N, E)
    kxx = kernel_diag(layer.kernel, flat)       # (N,)
    base = kxx - a.square().sum(0)              # prior conditional variance
    if s_full is not None:
        s_term = (b.unsqueeze(0) * (s_full @ b.unsqueeze(0))).sum(1)  # (E, N)
    else:
        c = s_sqrt.mT @ b.unsqueeze(0)          # (E, M, N)
        s_term = c.square().sum(1)
    var = base.unsqueeze(0) + s_term            # (E, N)
    if float(var.min().detach()) < VARIANCE_TOLERANCE * max(1.0, float(layer.kernel.variance.detach())):
        raise NotPositiveDefinite("negative marginal variance beyond roundoff tolerance")
    var = var.clamp_min(0.0)
    shape = x.shape[:-1] + (layer.n_latent,)
    return mu.reshape(shape), var.mT.reshape(shape)


def project(layer: GpLayer, latent_values: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Apply the output projection and the mean function shift."""
    return latent_values @ layer.projection.p.mT + mean_eval(layer.mean, x)


def layer_marginal(layer: GpLayer, x: torch.Tensor, qu_override=None):
    """Projected marginal mean and variance at each input row."""
    mu, var = latent_marginal(layer, x, qu_override)
    mean = project(layer, mu, x)
    variance = var @ layer.projection.p.square().mT
    return mean, variance


def layer_sample(layer: GpLayer, x: torch.Tensor, eps: torch.Tensor, qu_override=None) -> torch.Tensor:
    """Reparameterized draw from the per-point marginals.

    ``eps`` has one standard-normal entry per latent output, shape
    (..., E); the draw is ``mu + eps * sqrt(var)`` in latent space, then
    projected and mean-shifted. Deterministic given ``eps``.
    """
    eps = as_tensor(eps)
    mu, var = latent_marginal(layer, x, qu_override)
    if eps.shape != mu.shape:
        raise DimensionMismatch(f"eps shape {tuple(eps.shape)} != latent shape {tuple(mu.shape)}")
    # clamp guards the sqrt gradient when a variance lands exactly on zero
    latent = mu + eps * var.clamp_min(1e-300).sqrt()
    return project(layer, latent, x)


def layer_sample_correlated(layer: GpLayer, x_group: torch.Tensor, eps: torch.Tensor,
                            qu_override=None) -> torch.Tensor:
    """Joint draw over the K importance copies of each datapoint.

    ``x_group`` has shape (..., K, D): the trailing group axis holds the K
    locations that must share a single function draw. The joint posterior
    covariance of each group is factorized (O(K^3)) and multiplied into
    ``eps`` of shape (..., K, E).
    """
    x_group = as_tensor(x_group)
    eps = as_tensor(eps)
    if x_group.ndim < 2:
        raise DimensionMismatch("x_group must have a trailing (K, D) shape")
    k_copies = x_group.shape[-2]
    if k_copies == 1:
        # 1x1 covariance: identical to the independent marginal draw.
        return layer_sample(layer, x_group, eps, qu_override)

    batch_shape = x_group.shape[:-2]
    flat = x_group.reshape(-1, k_copies, x_group.shape[-1])  # (B, K, D)
    n_groups = flat.shape[0]
    m, s_full, s_sqrt = _qu_moments(layer, qu_override)
    e_latent = layer.n_latent

    kzz = kernel_matrix(layer.kernel, layer.inducing.z)
    l, _ = cholesky_psd(kzz)
    rows = flat.reshape(-1, x_group.shape[-1])               # (B*K, D)
    kzx = kernel_matrix(layer.kernel, layer.inducing.z, rows)
    a = tri_solve(l, kzx)                                    # (M, B*K)
    b = tri_solve(l, a, transposed=True)
    mu = (b.mT @ m).reshape(n_groups, k_copies, e_latent)

    kxx = kernel_matrix(layer.kernel, flat, flat)            # (B, K, K)
    m_ind = layer.inducing.count
    a_g = a.mT.reshape(n_groups, k_copies, m_ind)            # (B, K, M)
    b_g = b.mT.reshape(n_groups, k_copies, m_ind)
    base = kxx - a_g @ a_g.mT                                # (B, K, K)
    if s_full is not None:
        s_term = b_g.unsqueeze(1) @ s_full.unsqueeze(0) @ b_g.unsqueeze(1).mT
    else:
        c = b_g.unsqueeze(1) @ s_sqrt.unsqueeze(0)           # (B, E, K, M)
        s_term = c @ c.mT
    cov = base.unsqueeze(1) + s_term                         # (B, E, K, K)
    chol, _ = cholesky_psd(cov)
    eps_g = eps.reshape(n_groups, k_copies, e_latent).permute(0, 2, 1)  # (B, E, K)
    draws = (chol @ eps_g.unsqueeze(-1)).squeeze(-1)         # (B, E, K)
    latent = mu + draws.permute(0, 2, 1)
    out = project(layer, latent, flat)
    return out.reshape(batch_shape + (k_copies, layer.out_dim))


def layer_kl(layer: GpLayer, qu_override=None) -> torch.Tensor:
    """KL(q(u) || p(u)) summed over the latent outputs, closed form."""
    m, s_full, s_sqrt = _qu_moments(layer, qu_override)
    kzz = kernel_matrix(layer.kernel, layer.inducing.z)
    l, _ = cholesky_psd(kzz)
    m_ind = layer.inducing.count
    logdet_k = 2.0 * l.diagonal().log().sum()
    alpha = tri_solve(l, m)                                  # (M, E)
    quad = alpha.square().sum()
    if s_full is not None:
        w = tri_solve(l.unsqueeze(0), s_full)                # L^-1 S
        w = tri_solve(l.unsqueeze(0), w.mT)                  # L^-1 (L^-1 S)^T
        trace = w.diagonal(dim1=-2, dim2=-1).sum()
        s_chol, _ = cholesky_psd(s_full)
        logdet_s = 2.0 * s_chol.diagonal(dim1=-2, dim2=-1).log().sum()
    else:
        w = tri_solve(l.unsqueeze(0), s_sqrt)                # (E, M, M)
        trace = w.square().sum()
        logdet_s = 2.0 * s_sqrt.diagonal(dim1=-2, dim2=-1).log().sum()
    e_latent = layer.n_latent
    return 0.5 * (trace + quad - e_latent * m_ind + e_latent * logdet_k - logdet_s)


def set_q_to_prior(layer: GpLayer) -> None:
    """Reset q(u) to the prior N(0, Ktilde): zero mean, S = Ktilde."""
    kzz = kernel_matrix(layer.kernel, layer.inducing.z)
    l, _ = cholesky_psd(kzz)
    with torch.no_grad():
        layer.qu.set(torch.zeros_like(layer.qu.mean),
                     l.detach().expand(layer.n_latent, -1, -1))
