"""Mini-batch ELBO training with Adam, plus deterministic inference.

The default mode optimizes the single composed loss jointly for encoder and
decoder parameters. An alternating mode is available that applies the KL
gradient to the encoder and the segmentation-likelihood gradient to the
decoder as two separate steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from .rng import Rng
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 160
    batch_size: int = 1
    learning_rate: float = 1e-4
    beta: float = 1.0
    family: str = "exp"
    seed: int = 0
    curve_path: str | None = None
    checkpoint_path: str | None = None
    alternating: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.family not in M.FAMILIES:
            raise ValueError(f"family must be one of {M.FAMILIES}, got {self.family!r}")


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = {name: p for name, p in params.items() if p.requires_grad}
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        # theta -= lr * m_hat / (sqrt(v_hat) + eps), with the bias corrections
        # folded into the step size: m_hat/(sqrt(v_hat)+eps)
        # == m*sqrt(bc2)/bc1 / (sqrt(v) + eps*sqrt(bc2)).
        sqrt_bc2 = np.sqrt(bc2)
        step_size = lr * sqrt_bc2 / bc1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            denom = np.sqrt(v)
            denom += self.eps * sqrt_bc2
            np.divide(m, denom, out=denom)
            denom *= step_size
            p.data -= denom

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    kl: float
    nll: float


def _batch_tensors(dataset, indices, dtype=np.float32):
    images = np.stack([np.asarray(dataset[i][0], dtype=dtype) for i in indices])[:, None]
    masks = np.stack([np.asarray(dataset[i][1], dtype=dtype) for i in indices])[:, None]
    return Tensor(images), Tensor(masks)


def curve_csv_text(records) -> str:
    lines = ["epoch,loss,kl,nll"]
    for r in records:
        lines.append(f"{r.epoch},{r.loss:.9g},{r.kl:.9g},{r.nll:.9g}")
    return "".join(line + "\n" for line in lines)


def train(dataset, model_config: M.ModelConfig, train_config: TrainConfig):
    """Run epoch-based mini-batch training; returns (model, records).

    `dataset` is a sequence of (image, mask) 2-D array pairs already sized to
    model_config.input_size. Shuffle order is keyed on (seed, epoch) so runs
    are reproducible at any batch size. Writes the learning curve CSV and the
    final checkpoint when paths are configured.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    model_config = replace(model_config, family=train_config.family,
                           kl_weight=train_config.beta)
    model = M.DGNet(model_config, seed=train_config.seed)
    prior = M.PriorSpec(family=model_config.family)
    master = Rng(train_config.seed)
    noise_rng = master.split("latent-noise")

    if train_config.alternating:
        opt_enc = Adam({n: p for n, p in model.params.items() if n.startswith("enc.")})
        opt_dec = Adam({n: p for n, p in model.params.items() if n.startswith("dec.")})
        optimizers = (opt_enc, opt_dec)
    else:
        opt = Adam(model.params)
        optimizers = (opt,)

    n = len(dataset)
    records: list[EpochRecord] = []
    for epoch in range(train_config.epochs):
        order = master.split(("shuffle", epoch)).permutation(n)
        sums = np.zeros(3, dtype=np.float64)
        batches = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            images, masks = _batch_tensors(dataset, idx)
            noise = M.frozen_latent_noise(model, len(idx), noise_rng.split(("draw", epoch, start)))
            loss, kl, nll = M.elbo_loss(model, images, masks, rng=None, noise=noise,
                                        train=True, prior=prior)
            for o in optimizers:
                o.zero_grad()
            if train_config.alternating:
                # Min-step: KL gradient onto encoder parameters.
                (train_config.beta * kl).backward()
                opt_enc.step(train_config.learning_rate)
                opt_enc.zero_grad()
                opt_dec.zero_grad()
                # Max-step: likelihood gradient onto decoder parameters.
                nll.backward()
                opt_dec.step(train_config.learning_rate)
            else:
                loss.backward()
                opt.step(train_config.learning_rate)
            sums += (loss.item(), kl.item(), nll.item())
            batches += 1
        records.append(EpochRecord(epoch=epoch, loss=sums[0] / batches,
                                   kl=sums[1] / batches, nll=sums[2] / batches))

    if train_config.curve_path:
        with open(train_config.curve_path, "w", newline="") as fh:
            fh.write(curve_csv_text(records))
    if train_config.checkpoint_path:
        from . import data_io
        data_io.save_checkpoint(model, train_config.checkpoint_path)
    return model, records


def segment(model: M.DGNet, image, threshold: float = 0.5):
    """Deterministic segmentation of one 2-D image.

    Eval-mode encode, latent point estimate (no sampling), decode, threshold;
    ties go to oil. Returns (probability map, binary mask) as 2-D arrays.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"segment expects a 2-D image, got shape {img.shape}")
    x = Tensor(img[None, None])
    lp = model.encode(x, train=False)
    z = M.latent_point_estimate(model, lp)
    prob = model.decode(z, train=False).data[0, 0]
    mask = (prob >= threshold).astype(np.uint8)
    return prob, mask
