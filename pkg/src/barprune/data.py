"""Synthetic oriented-pattern datasets and in-memory dataset handling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng


@dataclass
class Dataset:
    pixels: np.ndarray  # uint8 (N, H, W, C)
    labels: np.ndarray  # uint8 (N,)
    num_classes: int

    def __post_init__(self):
        if len(self.pixels) != len(self.labels):
            raise ValueError("pixel and label counts differ")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError(f"label {int(self.labels.max())} out of range for {self.num_classes} classes")
        self.x = to_inputs(self.pixels)
        self.y = self.labels.astype(np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: Rng | None = None):
        """Yield ``(indices, x, y)`` minibatches; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield idx, self.x[idx], self.y[idx]


def to_inputs(pixels: np.ndarray) -> np.ndarray:
    """uint8 NHWC -> float32 NCHW, scaled to roughly unit variance around 0."""
    x = pixels.astype(np.float32).transpose(0, 3, 1, 2)
    return np.ascontiguousarray((x / 255.0 - 0.5) / 0.25)


def generate_patterns(
    n: int,
    num_classes: int = 4,
    size: int = 16,
    channels: int = 3,
    seed: int = 0,
    stream: int = 0,
    noise: float = 1.0,
    jitter: float = 0.8,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-dependent oriented gratings with per-sample jitter and pixel noise.

    Class ``c`` draws gratings at orientation ``pi * c / num_classes`` plus a
    uniform jitter of +/- ``jitter`` times half the class spacing, a random
    spatial frequency, phase and colour, a low-amplitude distractor grating,
    then Gaussian pixel noise.  Labels are balanced (class ``i % num_classes``)
    and shuffled.
    """
    rng = Rng(seed, 17, stream)
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy -= (size - 1) / 2
    xx -= (size - 1) / 2
    spacing = np.pi / num_classes
    theta = labels * spacing + rng.uniform(-1, 1, n) * jitter * spacing / 2
    freq = rng.uniform(0.12, 0.3, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    color = rng.uniform(0.3, 1.0, (n, channels))
    d_theta = rng.uniform(0, np.pi, n)
    d_freq = rng.uniform(0.1, 0.35, n)
    d_phase = rng.uniform(0, 2 * np.pi, n)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    dproj = np.cos(d_theta)[:, None, None] * xx + np.sin(d_theta)[:, None, None] * yy
    wave += 0.4 * np.sin(2 * np.pi * d_freq[:, None, None] * dproj + d_phase[:, None, None])
    img = wave[..., None] * color[:, None, None, :]
    img += rng.normal(0, noise, img.shape)
    pixels = np.clip(np.round(128 + 70 * img), 0, 255).astype(np.uint8)
    return pixels, labels.astype(np.uint8)


def make_splits(
    train: int = 2000,
    eval_: int = 500,
    num_classes: int = 4,
    size: int = 16,
    channels: int = 3,
    seed: int = 0,
    **kwargs,
) -> tuple[Dataset, Dataset]:
    """Train and eval splits drawn from independent random streams."""
    tr = generate_patterns(train, num_classes, size, channels, seed, stream=0, **kwargs)
    ev = generate_patterns(eval_, num_classes, size, channels, seed, stream=1, **kwargs)
    return Dataset(*tr, num_classes), Dataset(*ev, num_classes)
