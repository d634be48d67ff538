"""Latent-variable layer: concatenated covariates with a mean-field posterior.

Each datapoint receives an unobserved covariate w_n with independent N(0, 1)
prior components. The variational posterior q(w_n) = N(a_n, b_n) is either a
per-datapoint table or an amortized encoder network over (x_n, y_n). At
prediction time w is always drawn from the prior.
"""
from __future__ import annotations

import math

import torch

from .errors import DimensionMismatch, NonPositiveVariance
from .kernels import positive, positive_inverse
from .numerics import DTYPE, RngStream, as_tensor

_LOG_2PI = math.log(2.0 * math.pi)


def lv_concat(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Concatenate inputs with latent covariates, x first."""
    return torch.cat([as_tensor(x), as_tensor(w)], dim=-1)


def lv_split(xw: torch.Tensor, latent_dim: int):
    """Inverse of lv_concat."""
    return xw[..., :-latent_dim], xw[..., -latent_dim:]


def _check_variance(b: torch.Tensor) -> torch.Tensor:
    b = as_tensor(b)
    if bool((b <= 0).any()):
        raise NonPositiveVariance("latent variance b must be > 0")
    return b


def lv_sample_q(a: torch.Tensor, b: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized posterior draw w = a + eps * sqrt(b)."""
    b = _check_variance(b)
    return as_tensor(a) + as_tensor(eps) * b.sqrt()


def lv_log_ratio(w: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """log N(w | 0, 1) - log N(w | a, b), summed over latent dimensions."""
    w = as_tensor(w)
    a = as_tensor(a)
    b = _check_variance(b)
    per_dim = 0.5 * (b.log() + (w - a).square() / b - w.square())
    return per_dim.sum(-1)


def lv_kl(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """KL(N(a, b) || N(0, 1)) summed over latent dimensions."""
    a = as_tensor(a)
    b = _check_variance(b)
    return 0.5 * (b + a.square() - 1.0 - b.log()).sum(-1)


class EncoderNet:
    """Amortization network mapping (x_n, y_n) to (a_n, log-sd of w_n).

    Three tanh hidden layers of 10 units with skip connections between
    layers of equal width; the output head's scale bias starts at -5 so
    posterior standard deviations begin small.
    """

    HIDDEN = 10
    N_HIDDEN_LAYERS = 3
    SCALE_BIAS = -5.0

    def __init__(self, input_dim: int, latent_dim: int, stream: RngStream):
        self.input_dim = input_dim
        self.latent_dim = latent_dim
        self.weights: list[torch.Tensor] = []
        self.biases: list[torch.Tensor] = []
        dims = [input_dim] + [self.HIDDEN] * self.N_HIDDEN_LAYERS + [2 * latent_dim]
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = math.sqrt(6.0 / (d_in + d_out))  # Glorot uniform
            u = stream.child(i).normal(d_out, d_in)
            w = limit * (2.0 * _to_uniform(u) - 1.0)
            b = torch.zeros(d_out, dtype=DTYPE)
            if i == len(dims) - 2:
                b[latent_dim:] = self.SCALE_BIAS
            self.weights.append(w.clone().requires_grad_(True))
            self.biases.append(b.requires_grad_(True))

    def forward(self, x: torch.Tensor, y: torch.Tensor):
        x = as_tensor(x)
        y = as_tensor(y)
        if y.ndim == x.ndim - 1:
            y = y.unsqueeze(-1)
        h = torch.cat([x, y], dim=-1)
        if h.shape[-1] != self.input_dim:
            raise DimensionMismatch(
                f"encoder expects {self.input_dim} inputs, got {h.shape[-1]}"
            )
        for i in range(self.N_HIDDEN_LAYERS):
            out = torch.tanh(h @ self.weights[i].mT + self.biases[i])
            h = out + h if out.shape == h.shape else out
        head = h @ self.weights[-1].mT + self.biases[-1]
        a = head[..., : self.latent_dim]
        b = torch.exp(2.0 * head[..., self.latent_dim:])  # variance = sd^2
        return a, b

    def named_parameters(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"encoder.w{i}", w, True))
            out.append((f"encoder.b{i}", b, True))
        return out


def _to_uniform(z: torch.Tensor) -> torch.Tensor:
    """Map standard normals to (0, 1) uniforms via the normal CDF."""
    return 0.5 * (1.0 + torch.erf(z / math.sqrt(2.0)))


def encoder_forward(net: EncoderNet, x: torch.Tensor, y: torch.Tensor):
    """Per-datapoint variational parameters (a, b) from the encoder."""
    return net.forward(x, y)


class LvLayer:
    """Latent-covariate layer with per-point or amortized q(w_n)."""

    def __init__(self, latent_dim: int, n_train: int | None = None,
                 encoder: EncoderNet | None = None,
                 init_variance: float = 1.0):
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.latent_dim = latent_dim
        self.encoder = encoder
        if encoder is None:
            if n_train is None:
                raise ValueError("per-point mode needs the training size")
            self.raw_a = torch.zeros(n_train, latent_dim, dtype=DTYPE, requires_grad=True)
            raw_b = positive_inverse(torch.as_tensor(init_variance, dtype=DTYPE))
            self.raw_b = torch.full((n_train, latent_dim), float(raw_b), dtype=DTYPE,
                                    requires_grad=True)
        else:
            self.raw_a = None
            self.raw_b = None

    @property
    def amortized(self) -> bool:
        return self.encoder is not None

    def variational_params(self, indices=None, x=None, y=None):
        """(a, b) for a batch, from the table (by index) or the encoder."""
        if self.amortized:
            if x is None or y is None:
                raise ValueError("amortized mode needs (x, y) for the encoder")
            return self.encoder.forward(x, y)
        if indices is None:
            raise ValueError("per-point mode needs global datapoint indices")
        idx = torch.as_tensor(indices, dtype=torch.long)
        return self.raw_a[idx], positive(self.raw_b[idx])

    def named_parameters(self):
        if self.amortized:
            return self.encoder.named_parameters()
        return [("lv.raw_a", self.raw_a, True), ("lv.raw_b", self.raw_b, True)]
