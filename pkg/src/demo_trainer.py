"""
Toy end-to-end training run through the poly-scale convolution ops.

Model
-----
    x (N, 1, 32, 32)
    conv1  1 → 8,  K=3, stride 2, psconv lattice   → ReLU   (N, 8, 16, 16)
    conv2  8 → 16, K=3, stride 2, psconv lattice   → ReLU   (N, 16, 8, 8)
    global average pool                                      (N, 16)
    fc     16 → 3 (weight + bias)                            (N, 3)
    softmax cross-entropy, averaged over the batch

Convolutions are bias-free.  The same network with uniform d=1 lattices has
exactly the same parameters (1,275), so the two variants differ only in
where each kernel samples.

Data
----
``ScaleBlobDataset`` draws 32×32 images holding one Gaussian blob whose
sigma (1.5, 3.0 or 6.0) is the label.  Training uses a fixed set of
class-balanced batches drawn once per seed and visited in order; an epoch
is one pass over them.  Inputs are standardised with the mean and std of
that fixed set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import conv_engine
from .conv_engine import ConvSpec
from .kernel_lattice import DilationMatrix, DilationPattern, build_psconv, build_uniform
from .tensor_core import Rng, ShapeError

logger = logging.getLogger(__name__)

PARAM_NAMES = ("conv1.weight", "conv2.weight", "fc.weight", "fc.bias")
CLASS_NAMES = ("small", "medium", "large")
BLOB_SIGMAS = (1.5, 3.0, 6.0)
IMAGE_SIZE = 32
LOG_FIELDS = ("step", "epoch", "loss")

Params = Dict[str, np.ndarray]


class DivergenceError(ArithmeticError):
    """Raised when the loss or a gradient stops being finite."""

    def __init__(self, step: int, message: str = "") -> None:
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


# ── data ──────────────────────────────────────────────────────────────────────

class ScaleBlobDataset:
    """Seeded generator of single-blob images labelled by blob size."""

    def __init__(self, seed: int, size: int = IMAGE_SIZE, noise: float = 0.05) -> None:
        self._rng = Rng(seed).spawn(0)
        self.size = size
        self.noise = noise
        grid = np.arange(size, dtype=np.float64)
        self._yy, self._xx = np.meshgrid(grid, grid, indexing="ij")

    def _blob(self, sigma: float) -> np.ndarray:
        lo, hi = self.size * 10 / 32, self.size * 22 / 32
        cy, cx = self._rng.uniform(lo, hi, size=2)
        img = np.exp(-((self._yy - cy) ** 2 + (self._xx - cx) ** 2) / (2.0 * sigma * sigma))
        return img + self._rng.normal(img.shape, self.noise)

    def batch(self, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
        """Class-balanced batch: label counts differ by at most one."""
        labels = (np.arange(batch_size) % len(BLOB_SIGMAS))[self._rng.permutation(batch_size)]
        images = np.stack([self._blob(BLOB_SIGMAS[y]) for y in labels])[:, None]
        return images, labels.astype(np.int64)

    def batches(self, count: int, batch_size: int = 32) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [self.batch(batch_size) for _ in range(count)]


def standardise(batches: Sequence[Tuple[np.ndarray, np.ndarray]]) -> List[Tuple[np.ndarray, np.ndarray]]:
    pixels = np.concatenate([images.reshape(-1) for images, _ in batches])
    mean, std = float(pixels.mean()), float(pixels.std())
    return [((images - mean) / std, labels) for images, labels in batches]


# ── model ─────────────────────────────────────────────────────────────────────

def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to *logits*."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = logits.shape[0]
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class DemoModel:
    params: Params
    lattice1: DilationMatrix
    lattice2: DilationMatrix
    spec1: ConvSpec = field(default_factory=lambda: ConvSpec(1, 8, 3, 2))
    spec2: ConvSpec = field(default_factory=lambda: ConvSpec(8, 16, 3, 2))
    threads: int = 1

    @classmethod
    def create(
        cls,
        seed: int,
        pattern: Optional[DilationPattern] = None,
        uniform: bool = False,
        threads: int = 1,
    ) -> "DemoModel":
        """He-initialised convs, small classifier, zero bias."""
        pattern = pattern or DilationPattern.default()
        if uniform:
            lattice1, lattice2 = build_uniform(8, 1, 1), build_uniform(16, 8, 1)
        else:
            lattice1, lattice2 = build_psconv(8, 1, pattern), build_psconv(16, 8, pattern)
        rng = Rng(seed).spawn(1)
        params = {
            "conv1.weight": rng.normal((8, 1, 3, 3), math.sqrt(2.0 / 9)),
            "conv2.weight": rng.normal((16, 8, 3, 3), math.sqrt(2.0 / 72)),
            "fc.weight": rng.normal((3, 16), 0.25),
            "fc.bias": np.zeros(3),
        }
        return cls(params, lattice1, lattice2, threads=threads)

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def forward(self, x: np.ndarray, params: Optional[Params] = None) -> Tuple[np.ndarray, dict]:
        p = self.params if params is None else params
        z1 = conv_engine.psconv_forward_masked(x, p["conv1.weight"], self.spec1, self.lattice1, self.threads)
        a1 = _relu(z1)
        z2 = conv_engine.psconv_forward_masked(a1, p["conv2.weight"], self.spec2, self.lattice2, self.threads)
        a2 = _relu(z2)
        pooled = a2.mean(axis=(2, 3))
        logits = pooled @ p["fc.weight"].T + p["fc.bias"]
        return logits, {"x": x, "z1": z1, "a1": a1, "z2": z2, "pooled": pooled}

    def loss(self, x: np.ndarray, labels: np.ndarray, params: Optional[Params] = None) -> float:
        logits, _ = self.forward(x, params)
        return softmax_cross_entropy(logits, labels)[0]

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray) -> Tuple[float, Params]:
        p = self.params
        logits, cache = self.forward(x)
        loss, d_logits = softmax_cross_entropy(logits, labels)

        grads: Params = {
            "fc.weight": d_logits.T @ cache["pooled"],
            "fc.bias": d_logits.sum(axis=0),
        }
        d_pooled = d_logits @ p["fc.weight"]
        z2 = cache["z2"]
        d_z2 = np.broadcast_to(d_pooled[:, :, None, None] / (z2.shape[2] * z2.shape[3]), z2.shape)
        d_z2 = np.where(z2 > 0, d_z2, 0.0)
        grads["conv2.weight"] = conv_engine.conv2d_backward_weight(d_z2, cache["a1"], self.spec2, self.lattice2)
        d_a1 = conv_engine.conv2d_backward_input(
            d_z2, p["conv2.weight"], self.spec2, self.lattice2, cache["a1"].shape[2:], self.threads,
        )
        d_z1 = np.where(cache["z1"] > 0, d_a1, 0.0)
        grads["conv1.weight"] = conv_engine.conv2d_backward_weight(d_z1, cache["x"], self.spec1, self.lattice1)
        return loss, {name: grads[name] for name in PARAM_NAMES}

    def archive_tensors(self) -> List[Tuple[str, np.ndarray]]:
        return [(name, self.params[name]) for name in PARAM_NAMES]


# ── optimiser ─────────────────────────────────────────────────────────────────

def sgd_step(
    params: Params,
    grads: Params,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    velocity: Optional[Params] = None,
) -> Tuple[Params, Params]:
    """v ← m·v + g + wd·p;  p ← p − lr·v.  Returns new (params, velocity)."""
    if set(params) != set(grads):
        raise ShapeError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    velocity = velocity or {}
    new_params: Params = {}
    new_velocity: Params = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape:
            raise ShapeError(f"{name}: gradient {g.shape} does not match parameter {value.shape}")
        v = velocity.get(name)
        v = g + weight_decay * value if v is None else momentum * v + g + weight_decay * value
        new_velocity[name] = v
        new_params[name] = value - lr * v
    return new_params, new_velocity


# ── training loop ─────────────────────────────────────────────────────────────

@dataclass
class TrainResult:
    model: DemoModel
    losses: List[float]
    batches_per_epoch: int

    def epoch_means(self) -> List[float]:
        """Mean loss of every complete epoch."""
        n = self.batches_per_epoch
        return [float(np.mean(self.losses[i:i + n])) for i in range(0, len(self.losses) - n + 1, n)]

    def log_rows(self) -> List[dict]:
        return [
            {"step": step, "epoch": step // self.batches_per_epoch, "loss": repr(loss)}
            for step, loss in enumerate(self.losses)
        ]

    def summary(self) -> dict:
        means = self.epoch_means()
        return {
            "schema_version": 1,
            "steps": len(self.losses),
            "batches_per_epoch": self.batches_per_epoch,
            "initial_loss": self.losses[0],
            "final_loss": self.losses[-1],
            "first_epoch_mean": means[0] if means else None,
            "last_epoch_mean": means[-1] if means else None,
            "param_count": self.model.param_count(),
        }


def train(
    steps: int,
    lr: float,
    seed: int,
    *,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    pattern: Optional[DilationPattern] = None,
    uniform: bool = False,
    batch_size: int = 32,
    batches_per_epoch: int = 6,
    threads: int = 1,
    progress_every: int = 20,
) -> TrainResult:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    data = standardise(ScaleBlobDataset(seed).batches(batches_per_epoch, batch_size))
    model = DemoModel.create(seed, pattern, uniform=uniform, threads=threads)
    logger.info("Training demo model (%d params, %s lattices) for %d steps at lr %g",
                model.param_count(), "uniform" if uniform else "psconv", steps, lr)

    velocity: Optional[Params] = None
    losses: List[float] = []
    for step in range(steps):
        images, labels = data[step % batches_per_epoch]
        loss, grads = model.loss_and_grads(images, labels)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(step)
        losses.append(loss)
        model.params, velocity = sgd_step(model.params, grads, lr, momentum, weight_decay, velocity)
        if (step + 1) % progress_every == 0 or step + 1 == steps:
            logger.info("  step %d/%d  loss %.4f", step + 1, steps, loss)
    return TrainResult(model, losses, batches_per_epoch)
