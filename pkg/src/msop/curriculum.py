"""Visual-acuity training curriculum: Gaussian blur schedule and the epoch loop.

Training starts on heavily blurred copies of the samples and sharpens them as
epochs pass: sigma starts at sigma0 and is halved (integer floor) after every
k-th epoch once k' warmup epochs have passed, reaching 0 in finitely many
epochs.  The "anti" regime reverses that sigma sequence, "control" draws each
epoch's sigma at random from the same multiset, and "none" always trains on
the originals.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import tensor as T
from .blocks import MsopClassifier, prepare_input
from .tensor import SGD, Tensor, softmax_cross_entropy

REGIMES = ("va", "anti", "control", "none")


@dataclass(frozen=True)
class CurriculumState:
    """Blur schedule state carried across epochs (epoch counts from 1)."""

    sigma: int
    sigma0: int
    k: int
    k_prime: int
    epoch: int = 1

    def __post_init__(self):
        if self.sigma0 < 0 or self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.k < 1:
            raise ValueError("halving period k must be >= 1")
        if self.epoch < 1:
            raise ValueError("epochs count from 1")

    @classmethod
    def start(cls, sigma0: int, k: int, k_prime: int) -> "CurriculumState":
        return cls(sigma=int(sigma0), sigma0=int(sigma0), k=int(k),
                   k_prime=int(k_prime), epoch=1)

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "sigma0": self.sigma0, "k": self.k,
                "k_prime": self.k_prime, "epoch": self.epoch}

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumState":
        return cls(**d)


def sigma_schedule(state: CurriculumState) -> tuple[int, CurriculumState]:
    """Sigma to train with this epoch, and the state for the next epoch.

    Halving happens after the epoch's training, and only once the warmup has
    passed: sigma <- floor(sigma/2) when epoch > k' and epoch % k == 0.
    """
    sigma = state.sigma
    next_sigma = sigma
    if state.epoch > state.k_prime and state.epoch % state.k == 0:
        next_sigma = sigma // 2
    return sigma, replace(state, sigma=next_sigma, epoch=state.epoch + 1)


def sigma_sequence(sigma0: int, k: int, k_prime: int, epochs: int) -> list[int]:
    """Per-epoch sigma values produced by running the schedule for `epochs`."""
    state = CurriculumState.start(sigma0, k, k_prime)
    out = []
    for _ in range(epochs):
        sigma, state = sigma_schedule(state)
        out.append(sigma)
    return out


def regime_sigma_sequence(regime: str, sigma0: int, k: int, k_prime: int,
                          epochs: int, seed: int = 0) -> list[int]:
    """The sigma each epoch will train at, for any of the four regimes."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    base = sigma_sequence(sigma0, k, k_prime, epochs)
    if regime == "va":
        return base
    if regime == "anti":
        return list(reversed(base))
    if regime == "none":
        return [0] * epochs
    # control: each epoch draws from the curriculum's sigma multiset, so the
    # chance of a given sigma equals the fraction of epochs it is used
    rng = np.random.default_rng([int(seed), 2])
    return [int(rng.choice(base)) for _ in range(epochs)]


# ---------------------------------------------------------------------------
# Gaussian blur
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian, truncated at radius ceil(3*sigma).

    The kernel has odd length 2*ceil(3*sigma)+1, is exactly symmetric, and
    sums to 1; blurring applies it separably (rows, then columns).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive; use blur_image for sigma == 0")
    radius = math.ceil(3 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur_image(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders; sigma 0 is the identity.

    uint8 images round back to uint8 clamped to [0, 255]; float images are
    clamped to their own value range (the kernel is a convex combination, so
    this only removes floating-point overshoot).
    """
    arr = np.asarray(img)
    if arr.size == 0:
        raise ValueError("empty image")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return arr.copy()
    kernel = gaussian_kernel(sigma)
    work = arr.astype(np.float64)
    work = ndimage.correlate1d(work, kernel, axis=0, mode="reflect")
    work = ndimage.correlate1d(work, kernel, axis=1, mode="reflect")
    if arr.dtype == np.uint8:
        return np.clip(np.rint(work), 0, 255).astype(np.uint8)
    return np.clip(work, arr.min(), arr.max())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimizer and curriculum hyper-parameters for one training run."""

    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay: float = 0.9          # multiplier applied every lr_decay_every epochs
    lr_decay_every: int = 5
    clip_grad_norm: float | None = 5.0    # global L2 clip; None disables
    sigma0: int = 16
    k: int = 5
    k_prime: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainLogEntry:
    epoch: int
    sigma: int
    loss: float
    accuracy: float
    wall_time: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "sigma": self.sigma, "loss": self.loss,
                "accuracy": self.accuracy, "wall_time": self.wall_time}


def epoch_learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients jointly so their global L2 norm is at most max_norm.

    Rare batches send enormous gradients through the covariance attention
    path; left unclipped, momentum turns one such spike into a divergence.
    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def run_training(model: MsopClassifier, samples, regime: str, cfg: TrainConfig,
                 seed: int, start_epoch: int = 1,
                 optimizer: SGD | None = None) -> tuple[list[TrainLogEntry], CurriculumState, SGD]:
    """Train `model` in place under one curriculum regime.

    ``samples`` is a sequence of (grayscale image, class index) pairs already
    resized to the network input; when the epoch's sigma is positive the whole
    set is re-blurred from the originals, as the schedule demands.  All
    randomness (sample order, control-regime draws) derives from ``seed``, so
    identical seed and config reproduce the parameter trajectory bit for bit.

    Returns the per-epoch log, the curriculum state after the last epoch, and
    the optimizer (whose momentum buffers a checkpoint can persist).
    """
    if not samples:
        raise ValueError("training set is empty")
    sigmas = regime_sigma_sequence(regime, cfg.sigma0, cfg.k, cfg.k_prime,
                                   cfg.epochs, seed)
    if optimizer is None:
        optimizer = SGD(model.param_tensors(), lr=cfg.lr, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay)
    log: list[TrainLogEntry] = []
    n = len(samples)
    for epoch in range(start_epoch, cfg.epochs + 1):
        started = time.perf_counter()
        sigma = sigmas[epoch - 1]
        if sigma > 0:
            blurred = [blur_image(img, sigma) for img, _ in samples]
        else:
            blurred = [img for img, _ in samples]
        optimizer.lr = epoch_learning_rate(cfg, epoch)
        order = np.random.default_rng([int(seed), 1, epoch]).permutation(n)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            optimizer.zero_grad()
            for idx in batch:
                img, label = blurred[idx], samples[idx][1]
                x = Tensor(prepare_input(img, model.config.input_channels))
                logits = model.forward_logits(x)
                loss = T.scale(softmax_cross_entropy(logits, label), 1.0 / len(batch))
                loss.backward()
                total_loss += float(loss.data) * len(batch)
                if int(np.argmax(logits.data)) == label:
                    correct += 1
            if cfg.clip_grad_norm is not None:
                clip_gradients(optimizer.params, cfg.clip_grad_norm)
            optimizer.step()
        log.append(TrainLogEntry(
            epoch=epoch, sigma=int(sigma), loss=total_loss / n,
            accuracy=correct / n, wall_time=time.perf_counter() - started))
    state = CurriculumState.start(cfg.sigma0, cfg.k, cfg.k_prime)
    for _ in range(cfg.epochs):
        _, state = sigma_schedule(state)
    return log, state, optimizer
