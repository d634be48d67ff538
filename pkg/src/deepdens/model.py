"""Model composition: spec strings, layer stacking, and propagation.

A model is an ordered stack of latent-variable and GP layers applied to the
input, with a Gaussian likelihood on the final (scalar-output) GP layer.
The final layer is never sampled during propagation: its marginal mean and
variance are returned so the likelihood expectation can be taken in closed
form. Fully-sampled propagation (needed by the non-collapsed importance
bound and by prediction) is available behind a flag.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch
from scipy.cluster.vq import kmeans2

from .errors import DimensionMismatch, EmptySpec, NoFinalGp, NonPositiveNoise, ParseError
from .gp_layer import (
    GaussianVariationalU,
    GpLayer,
    InducingSet,
    layer_marginal,
    layer_sample,
    layer_sample_correlated,
    set_q_to_prior as _layer_q_to_prior,
)
from .kernels import (
    KernelParams,
    LinearMean,
    OutputProjection,
    first_principal_direction,
    kernel_matrix,
    pca_projection,
    positive,
    positive_inverse,
)
from .lv_layer import EncoderNet, LvLayer, lv_concat, lv_sample_q
from .numerics import DTYPE, RngStream, as_tensor, cholesky_psd, indexed_normals

# Stream purpose codes; every draw site owns a distinct child key.
EPS_LV = 1
EPS_GP = 2
EPS_FINAL = 3
EPS_NOISE = 4
INIT_PAD = 10
INIT_KMEANS = 11
INIT_ENCODER = 12
PRIOR_PATH = 13
BATCH_SHUFFLE = 20
EVAL_SUBSAMPLE = 21


# ---------------------------------------------------------------------------
# Model specification strings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer descriptors plus likelihood settings.

    ``layers`` holds the tokens "LV" / "GP" in application order. The final
    layer must be a GP with scalar observed output.
    """

    layers: tuple[str, ...]
    latent_dim: int = 1
    inner_width: int = 5
    likelihood_variance: float = 0.01

    def __post_init__(self):
        if not self.layers:
            raise EmptySpec("model spec has no layers")
        if self.layers[-1] != "GP":
            raise NoFinalGp("model spec must end in a GP layer")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    @property
    def spec_string(self) -> str:
        return "-".join(self.layers)

    def __str__(self) -> str:
        return self.spec_string


def parse_spec(text: str, *, latent_dim: int = 1, inner_width: int = 5,
               likelihood_variance: float = 0.01) -> ModelSpec:
    """Parse a hyphen-separated layer string such as "LV-GP-GP"."""
    if text is None or text.strip() == "":
        raise EmptySpec("empty model spec")
    tokens = [t.strip().upper() for t in text.strip().split("-")]
    for i, tok in enumerate(tokens):
        if tok not in ("LV", "GP"):
            raise ParseError(f"unknown layer token '{tok}' at position {i}", position=i)
    if tokens[-1] != "GP":
        raise NoFinalGp("model spec must end in a GP layer")
    return ModelSpec(tuple(tokens), latent_dim=latent_dim, inner_width=inner_width,
                     likelihood_variance=likelihood_variance)


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------

class DgpModel:
    """Instantiated layer stack with a Gaussian likelihood."""

    def __init__(self, spec: ModelSpec, layers: list, input_dim: int):
        self.spec = spec
        self.layers = layers
        self.input_dim = input_dim
        dim = input_dim
        for layer in layers:
            if isinstance(layer, LvLayer):
                dim += layer.latent_dim
            else:
                if layer.input_dim != dim:
                    raise DimensionMismatch(
                        f"layer expects {layer.input_dim} inputs but receives {dim}"
                    )
                dim = layer.out_dim
        if dim != 1:
            raise DimensionMismatch("final GP layer must produce a scalar output")
        if spec.likelihood_variance <= 0:
            raise NonPositiveNoise("likelihood variance must be > 0")
        self.raw_likelihood_variance = positive_inverse(
            torch.as_tensor(spec.likelihood_variance, dtype=DTYPE)
        ).clone().requires_grad_(True)

    @property
    def likelihood_variance(self) -> torch.Tensor:
        return positive(self.raw_likelihood_variance)

    @property
    def gp_layers(self) -> list[GpLayer]:
        return [l for l in self.layers if isinstance(l, GpLayer)]

    @property
    def lv_layers(self) -> list[LvLayer]:
        return [l for l in self.layers if isinstance(l, LvLayer)]

    @property
    def final_layer(self) -> GpLayer:
        return self.layers[-1]

    def named_parameters(self):
        out = [("likelihood.raw_variance", self.raw_likelihood_variance, True)]
        for i, layer in enumerate(self.layers):
            for name, tensor, trainable in layer.named_parameters():
                out.append((f"layer{i}.{name}", tensor, trainable))
        return out

    def set_q_to_prior(self) -> None:
        for layer in self.gp_layers:
            _layer_q_to_prior(layer)


def _dedupe_rows(z: torch.Tensor, stream: RngStream) -> torch.Tensor:
    """Perturb duplicate rows so the inducing-set invariant holds."""
    scale = float(z.std()) or 1.0
    noise = stream.normal(*z.shape)
    for attempt in range(1, 6):
        if z.shape[0] == 1:
            return z
        dist = torch.cdist(z, z)
        dist.fill_diagonal_(float("inf"))
        if float(dist.min()) > 1e-10:
            return z
        z = z + noise * (1e-6 * attempt * scale)
    return z


def _choose_inducing(h: torch.Tensor, n_inducing: int, stream: RngStream) -> torch.Tensor:
    """k-means centers for large data, the data itself otherwise."""
    n = h.shape[0]
    if n <= n_inducing:
        z = h.clone()
    else:
        gen = stream.numpy_generator()
        centers, _ = kmeans2(h.detach().numpy(), n_inducing, minit="++", seed=gen)
        z = torch.as_tensor(centers, dtype=DTYPE)
    return _dedupe_rows(z, stream.child(0))


def build_model(spec: ModelSpec, x, y=None, *, n_inducing: int = 128,
                amortized: bool = False, inducing_trainable: bool = False,
                stream: RngStream | None = None) -> DgpModel:
    """Construct and initialize the layer stack for training data ``x``.

    Inducing inputs come from k-means on the layer's (padded) training
    representation, projections from its principal components. The final GP
    gets a scalar output with a fixed linear mean along the first principal
    direction of its input. ``y`` is required for amortized latent layers.
    """
    if stream is None:
        stream = RngStream(0).child(99)
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionMismatch("training inputs must be a 2-D matrix")
    n, input_dim = x.shape
    if amortized and y is None:
        raise ValueError("amortized latent layers need training targets y")
    h = x.clone()
    layers: list = []
    n_gp_seen = 0
    n_gp_total = sum(1 for t in spec.layers if t == "GP")
    for li, tok in enumerate(spec.layers):
        if tok == "LV":
            if amortized:
                encoder = EncoderNet(input_dim + 1, spec.latent_dim,
                                     stream.child(INIT_ENCODER, li))
                layers.append(LvLayer(spec.latent_dim, encoder=encoder))
            else:
                layers.append(LvLayer(spec.latent_dim, n_train=n))
            pad = stream.child(INIT_PAD, li).normal(n, spec.latent_dim)
            h = torch.cat([h, pad], dim=-1)
            continue
        n_gp_seen += 1
        d_cur = h.shape[1]
        kernel = KernelParams(1.0, input_dim=d_cur)
        z = _choose_inducing(h, n_inducing, stream.child(INIT_KMEANS, li))
        inducing = InducingSet(z, trainable=inducing_trainable)
        final = n_gp_seen == n_gp_total
        if final:
            qu = GaussianVariationalU(z.shape[0], 1, init_sqrt_scale=1.0)
            mean = LinearMean(first_principal_direction(h).unsqueeze(0))
            projection = OutputProjection.identity(1)
        else:
            qu = GaussianVariationalU(z.shape[0], spec.inner_width, init_sqrt_scale=1e-5)
            mean = LinearMean.identity(d_cur)
            projection = OutputProjection(pca_projection(h, d_cur, spec.inner_width))
        layers.append(GpLayer(kernel, inducing, qu, mean, projection))
        # At initialization the latent GPs contribute zero mean, so the
        # deterministic forward pass for later layers is the mean function.
        if not final:
            h = h @ mean.weight.mT + mean.bias
    return DgpModel(spec, layers, input_dim)


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------

class DrawBundle(Protocol):
    """Per-layer standard-normal draws for one propagation pass."""

    k: int

    def lv(self, layer_idx: int, dim: int) -> torch.Tensor: ...
    def gp(self, layer_idx: int, width: int) -> torch.Tensor: ...
    def noise(self) -> torch.Tensor: ...


@dataclass
class CounterBundle:
    """Draws keyed by (purpose, step, layer, datapoint, sample, dimension)."""

    stream: RngStream
    step: int
    row_keys: np.ndarray
    k: int

    def lv(self, layer_idx: int, dim: int) -> torch.Tensor:
        return indexed_normals(self.stream.child(EPS_LV, self.step, layer_idx),
                               self.row_keys, self.k, dim)

    def gp(self, layer_idx: int, width: int) -> torch.Tensor:
        return indexed_normals(self.stream.child(EPS_GP, self.step, layer_idx),
                               self.row_keys, self.k, width)

    def noise(self) -> torch.Tensor:
        return indexed_normals(self.stream.child(EPS_NOISE, self.step),
                               self.row_keys, self.k, 1).squeeze(-1)


@dataclass
class FixedBundle:
    """Explicit draws for tests: missing entries default to zeros."""

    k: int
    n_rows: int
    lv_eps: dict = field(default_factory=dict)
    gp_eps: dict = field(default_factory=dict)
    noise_eps: torch.Tensor | None = None

    def lv(self, layer_idx: int, dim: int) -> torch.Tensor:
        if layer_idx in self.lv_eps:
            return as_tensor(self.lv_eps[layer_idx])
        return torch.zeros(self.n_rows, self.k, dim, dtype=DTYPE)

    def gp(self, layer_idx: int, width: int) -> torch.Tensor:
        if layer_idx in self.gp_eps:
            return as_tensor(self.gp_eps[layer_idx])
        return torch.zeros(self.n_rows, self.k, width, dtype=DTYPE)

    def noise(self) -> torch.Tensor:
        if self.noise_eps is not None:
            return as_tensor(self.noise_eps)
        return torch.zeros(self.n_rows, self.k, dtype=DTYPE)


@dataclass
class LatentPosterior:
    """How q(w_n) is looked up during propagation.

    ``indices`` addresses per-point tables; ``y`` feeds amortized encoders.
    When propagation runs without a posterior (prediction), w is drawn from
    the prior instead.
    """

    indices: np.ndarray | None = None
    y: torch.Tensor | None = None
    x0: torch.Tensor | None = None


@dataclass
class PropagateResult:
    """Outcome of one propagation pass over a batch.

    ``final_inputs`` are the locations fed to the final GP layer; the final
    layer itself is reported by its marginal (mean, variance) per copy, plus
    an optional joint sample when ``sample_final`` was requested. ``lv_terms``
    holds (w, a, b) per latent layer for the importance log-ratios.
    """

    final_inputs: torch.Tensor
    final_mean: torch.Tensor
    final_var: torch.Tensor
    final_sample: torch.Tensor | None
    lv_terms: list


def propagate(model: DgpModel, x: torch.Tensor, draws: DrawBundle,
              mode: str = "independent", *, posterior: LatentPosterior | None = None,
              sample_final: bool = False, final_qu=None) -> PropagateResult:
    """Push a batch through the stack under the given noise draws.

    In "correlated" mode all K copies of a datapoint share a single function
    draw per GP layer (joint K x K covariance); in "independent" mode every
    copy is drawn from its own marginal. The final layer is never sampled
    unless ``sample_final`` is set.
    """
    if mode not in ("independent", "correlated"):
        raise ValueError(f"unknown propagation mode '{mode}'")
    x = as_tensor(x)
    b, k = x.shape[0], draws.k
    h = x.unsqueeze(1).expand(b, k, x.shape[1])
    lv_terms = []
    correlated = mode == "correlated"
    for li, layer in enumerate(model.layers):
        if isinstance(layer, LvLayer):
            eps = draws.lv(li, layer.latent_dim)
            if posterior is None:
                w = eps
                lv_terms.append(None)
            else:
                x_enc = posterior.x0 if posterior.x0 is not None else x
                a, bvar = layer.variational_params(indices=posterior.indices,
                                                   x=x_enc, y=posterior.y)
                a = a.unsqueeze(1)
                bvar = bvar.unsqueeze(1)
                w = lv_sample_q(a, bvar, eps)
                lv_terms.append((w, a, bvar))
            h = lv_concat(h, w)
            continue
        is_final = layer is model.layers[-1]
        if not is_final:
            eps = draws.gp(li, layer.n_latent)
            if correlated:
                h = layer_sample_correlated(layer, h, eps)
            else:
                h = layer_sample(layer, h, eps)
            continue
        mean, var = layer_marginal(layer, h, qu_override=final_qu)
        sample = None
        if sample_final:
            eps = draws.gp(li, layer.n_latent)
            if correlated:
                sample = layer_sample_correlated(layer, h, eps, qu_override=final_qu)
            else:
                sample = layer_sample(layer, h, eps, qu_override=final_qu)
            sample = sample.squeeze(-1)
        return PropagateResult(h, mean.squeeze(-1), var.squeeze(-1), sample, lv_terms)
    raise AssertionError("unreachable: spec guarantees a final GP layer")


def prior_sample_path(model: DgpModel, x_grid: torch.Tensor, stream: RngStream,
                      n_paths: int = 1) -> torch.Tensor:
    """Joint draws from the model prior over a grid of inputs.

    Latent covariates come from N(0, 1) and every GP layer from its prior
    (zero-mean, full covariance over the grid). Returns (n_paths, G).
    """
    x_grid = as_tensor(x_grid)
    if x_grid.ndim != 2:
        raise DimensionMismatch("grid must be a 2-D matrix")
    g = x_grid.shape[0]
    paths = []
    for p in range(n_paths):
        h = x_grid
        for li, layer in enumerate(model.layers):
            key = stream.child(PRIOR_PATH, p, li)
            if isinstance(layer, LvLayer):
                w = key.normal(g, layer.latent_dim)
                h = lv_concat(h, w)
                continue
            kxx = kernel_matrix(layer.kernel, h)
            l, _ = cholesky_psd(kxx)
            eps = key.normal(g, layer.n_latent)
            latent = l @ eps
            h = latent @ layer.projection.p.mT + h @ layer.mean.weight.mT + layer.mean.bias
        paths.append(h.squeeze(-1))
    return torch.stack(paths)
