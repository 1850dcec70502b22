"""Inference/generative segmentation network and its training loss.

The encoder maps an intensity image through four stride-2 conv+BN+LeakyReLU
blocks and a dense head to a 2-channel latent parameterization (location and
log-scale). The decoder inverts that path with transposed convolutions and a
final sigmoid, emitting a per-pixel oil probability map.

Two latent families are supported: a Gaussian baseline and an exponential
family matching the physical backscatter law. The loss is the negative
single-sample ELBO estimate: per-pixel Bernoulli NLL of the ground-truth mask
plus a weighted KL between the latent posterior and its prior.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

FAMILIES = ("gauss", "exp")

_CLAMP = 6.0              # latent log-parameter clamp
_PROB_EPS = 1e-7          # probability clamp for the Bernoulli NLL


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    latent_dim: int = 128
    family: str = "exp"
    kl_weight: float = 1.0
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if len(self.channels) != 4:
            raise ValueError(f"expected 4 encoder channel counts, got {self.channels}")
        if self.input_size % 16 != 0 or self.input_size < 16:
            raise ValueError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")

    @property
    def seed_size(self) -> int:
        """Spatial side of the decoder's starting feature map."""
        return self.input_size // 16


@dataclass
class LatentParams:
    """Per-sample 2-channel latent distribution parameters."""

    c0: Tensor    # channel 0: location (gauss) / log-mean (exp)
    c1: Tensor    # channel 1: log-scale (unused by the exp family)
    family: str


@dataclass(frozen=True)
class PriorSpec:
    family: str
    rate: float = 1.0      # exp family: prior rate per dimension

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.rate <= 0:
            raise ValueError("prior rate must be positive")


class DGNet:
    """Encoder + decoder with named parameters and batch-norm buffers."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 _init: bool = True):
        self.config = config
        self.dtype = dtype
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._build(Rng(seed) if _init else None)

    def _add_param(self, name, shape, rng, fan_in=None):
        if rng is None or fan_in is None:
            data = np.zeros(shape, dtype=self.dtype)
        else:
            bound = math.sqrt(1.0 / fan_in)
            data = ((rng.uniform(shape) * 2.0 - 1.0) * bound).astype(self.dtype)
        self.params[name] = Tensor(data, requires_grad=True)

    def _add_bn(self, name, channels, rng):
        self.params[f"{name}.gamma"] = Tensor(np.ones(channels, dtype=self.dtype),
                                              requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(channels, dtype=self.dtype),
                                             requires_grad=True)
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(channels, dtype=self.dtype)

    def _build(self, rng):
        cfg = self.config
        k = cfg.kernel
        chans = (1,) + tuple(cfg.channels)
        for i in range(4):
            c_in, c_out = chans[i], chans[i + 1]
            sub = rng.split(f"enc{i}") if rng else None
            self._add_param(f"enc.conv{i}.w", (c_out, c_in, k, k), sub, fan_in=c_in * k * k)
            self._add_param(f"enc.conv{i}.b", (c_out,), None)
            self._add_bn(f"enc.bn{i}", c_out, rng)
        flat = cfg.channels[-1] * cfg.seed_size ** 2
        self._add_param("enc.fc.w", (flat, 2 * cfg.latent_dim),
                        rng.split("encfc") if rng else None, fan_in=flat)
        self._add_param("enc.fc.b", (2 * cfg.latent_dim,), None)

        self._add_param("dec.fc.w", (cfg.latent_dim, flat),
                        rng.split("decfc") if rng else None, fan_in=cfg.latent_dim)
        self._add_param("dec.fc.b", (flat,), None)
        dchans = tuple(reversed(cfg.channels)) + (1,)
        for i in range(4):
            c_in, c_out = dchans[i], dchans[i + 1]
            sub = rng.split(f"dec{i}") if rng else None
            self._add_param(f"dec.deconv{i}.w", (c_in, c_out, k, k), sub, fan_in=c_in * k * k)
            self._add_param(f"dec.deconv{i}.b", (c_out,), None)
            if i < 3:
                self._add_bn(f"dec.bn{i}", c_out, rng)

    # -- persistence helpers -------------------------------------------------

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        """All named arrays (parameters + buffers) in a stable order."""
        out = OrderedDict((name, p.data) for name, p in self.params.items())
        out.update(self.buffers)
        return out

    def astype(self, dtype) -> "DGNet":
        """Copy of the model with parameters/buffers cast to `dtype`."""
        clone = DGNet(self.config, dtype=dtype, _init=False)
        for name, p in self.params.items():
            clone.params[name] = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
        for name, b in self.buffers.items():
            clone.buffers[name] = b.astype(dtype)
        return clone

    # -- forward -------------------------------------------------------------

    def encode(self, image: Tensor, train: bool = True) -> LatentParams:
        cfg = self.config
        if image.data.ndim != 4 or image.shape[1] != 1:
            raise T.ShapeError(f"encode expects [N,1,H,W], got {image.shape}")
        if image.shape[2] != cfg.input_size or image.shape[3] != cfg.input_size:
            raise T.ShapeError(
                f"encode expects {cfg.input_size}x{cfg.input_size} input, "
                f"got {image.shape[2]}x{image.shape[3]}")
        x = image
        for i in range(4):
            x = T.conv2d(x, self.params[f"enc.conv{i}.w"], self.params[f"enc.conv{i}.b"],
                         stride=cfg.stride, pad=cfg.pad)
            x = T.batchnorm2d(x, self.params[f"enc.bn{i}.gamma"], self.params[f"enc.bn{i}.beta"],
                              self.buffers[f"enc.bn{i}.running_mean"],
                              self.buffers[f"enc.bn{i}.running_var"], train=train)
            x = x.leaky_relu(cfg.leaky_slope)
        n = x.shape[0]
        x = x.reshape(n, cfg.channels[-1] * cfg.seed_size ** 2)
        head = T.dense(x, self.params["enc.fc.w"], self.params["enc.fc.b"])
        c0 = head.slice_cols(0, cfg.latent_dim)
        c1 = head.slice_cols(cfg.latent_dim, 2 * cfg.latent_dim)
        return LatentParams(c0=c0, c1=c1, family=cfg.family)

    def decode(self, z: Tensor, train: bool = True) -> Tensor:
        cfg = self.config
        if z.data.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise T.ShapeError(f"decode expects [N,{cfg.latent_dim}], got {z.shape}")
        n = z.shape[0]
        x = T.dense(z, self.params["dec.fc.w"], self.params["dec.fc.b"])
        x = x.reshape(n, cfg.channels[-1], cfg.seed_size, cfg.seed_size)
        for i in range(4):
            x = T.conv2d_transpose(x, self.params[f"dec.deconv{i}.w"],
                                   self.params[f"dec.deconv{i}.b"],
                                   stride=cfg.stride, pad=cfg.pad)
            if i < 3:
                x = T.batchnorm2d(x, self.params[f"dec.bn{i}.gamma"],
                                  self.params[f"dec.bn{i}.beta"],
                                  self.buffers[f"dec.bn{i}.running_mean"],
                                  self.buffers[f"dec.bn{i}.running_var"], train=train)
                x = x.leaky_relu(cfg.leaky_slope)
            else:
                x = x.sigmoid()
        return x


# -- latent sampling and loss terms -------------------------------------------


def frozen_latent_noise(model: DGNet, batch: int, rng: Rng) -> np.ndarray:
    """Pre-draw the latent noise used by sample_latent, for deterministic replays."""
    shape = (batch, model.config.latent_dim)
    if model.config.family == "gauss":
        return rng.normal(shape)
    return rng.uniform(shape)


def sample_latent(lp: LatentParams, rng: Rng | None, noise: np.ndarray | None = None) -> Tensor:
    """Reparameterized draw from the latent posterior.

    Gaussian: z = c0 + exp(clamp(c1)) * eps with eps ~ N(0,1).
    Exponential: z = -mean * ln(1-u) with mean = exp(clamp(c0)); the second
    channel is architectural parity only (an exponential's scale is its mean).
    """
    if lp.family not in FAMILIES:
        raise ValueError(f"unknown latent family {lp.family!r}")
    shape = lp.c0.shape
    dtype = lp.c0.dtype
    if lp.family == "gauss":
        eps = noise if noise is not None else rng.normal(shape)
        s = lp.c1.clamp(-_CLAMP, _CLAMP).exp()
        return lp.c0 + s * Tensor(np.asarray(eps, dtype=dtype))
    u = noise if noise is not None else rng.uniform(shape)
    factor = -np.log1p(-np.asarray(u, dtype=np.float64))
    m = lp.c0.clamp(-_CLAMP, _CLAMP).exp()
    return m * Tensor(factor.astype(dtype))


def kl_term(lp: LatentParams, prior: PriorSpec) -> Tensor:
    """KL(posterior || prior), summed over latent dimensions, mean over batch.

    Gaussian vs N(0,1): sum 0.5 * (mu^2 + s^2 - ln s^2 - 1).
    Exponential with mean m vs rate-r prior: sum (-ln m - ln r + r*m - 1),
    i.e. KL(Exp(1/m) || Exp(r)).
    """
    if lp.family != prior.family:
        raise ValueError(f"family mismatch: latent {lp.family!r} vs prior {prior.family!r}")
    n = lp.c0.shape[0]
    if lp.family == "gauss":
        c1 = lp.c1.clamp(-_CLAMP, _CLAMP)
        per_elem = 0.5 * (lp.c0 * lp.c0 + (2.0 * c1).exp() - 2.0 * c1 - 1.0)
    else:
        c0 = lp.c0.clamp(-_CLAMP, _CLAMP)
        per_elem = prior.rate * c0.exp() - c0 - (1.0 + math.log(prior.rate))
    return per_elem.sum() / n


def seg_nll(prob: Tensor, gt_mask: Tensor) -> Tensor:
    """Mean per-pixel Bernoulli negative log-likelihood of the mask."""
    if prob.shape != gt_mask.shape:
        raise T.ShapeError(f"shape mismatch: prob {prob.shape} vs mask {gt_mask.shape}")
    p = prob.clamp(_PROB_EPS, 1.0 - _PROB_EPS)
    y = gt_mask
    per_pixel = -(y * p.log() + (1.0 - y) * (1.0 - p).log())
    return per_pixel.mean()


def elbo_loss(model: DGNet, image: Tensor, gt_mask: Tensor, rng: Rng | None,
              noise: np.ndarray | None = None, train: bool = True,
              prior: PriorSpec | None = None):
    """Negative single-sample ELBO estimate: (loss, kl, nll) with loss = nll + beta*kl."""
    if prior is None:
        prior = PriorSpec(family=model.config.family)
    lp = model.encode(image, train=train)
    z = sample_latent(lp, rng, noise=noise)
    prob = model.decode(z, train=train)
    nll = seg_nll(prob, gt_mask)
    kl = kl_term(lp, prior)
    loss = nll + model.config.kl_weight * kl
    return loss, kl, nll


def latent_point_estimate(model: DGNet, lp: LatentParams) -> Tensor:
    """Deterministic latent for inference: c0 (gauss) or the posterior mean exp(c0) (exp)."""
    if lp.family == "gauss":
        return lp.c0
    return lp.c0.clamp(-_CLAMP, _CLAMP).exp()
