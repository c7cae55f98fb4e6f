"""Synthetic multi-modal simulator, Latin hypercube designs, dataset files.

The simulator maps a 5-vector in the unit box to a stack of band images and
8 diagnostic scalars through shared latent quantities (amplitude, radius,
center, aspect, yield), so the modalities are correlated.  A sharp logistic
in the yield emulates an ignition-cliff nonlinearity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DATASET_MAGIC = b"MACCDS01"

D_IN = 5
N_SCALAR = 8
STD_CLAMP = 1e-8


def logistic(t):
    return 1.0 / (1.0 + np.exp(-t))


def latent_physics(x):
    """Shared latent quantities (A, r, cx, cy, aspect, yield) for one input."""
    x = np.asarray(x, dtype=np.float64)
    amp = 0.5 + 1.5 * x[0] ** 2
    rad = 0.1 + 0.3 * x[1]
    cx = 0.3 + 0.4 * x[2]
    cy = 0.3 + 0.4 * x[3]
    aspect = 0.5 + x[4]
    yld = amp * (1.0 + 9.0 * logistic(20.0 * (x[0] * x[1] - 0.5)))
    return amp, rad, cx, cy, aspect, yld


def band_attenuation(k, x1):
    return np.exp(-0.8 * k * (1.2 - x1))


@dataclass
class Sample:
    x: np.ndarray          # (d_in,)
    images: np.ndarray     # (n_band, H, W)
    scalars: np.ndarray    # (n_sca,)


def _grid(size):
    # pixel centers on [0,1]
    g = (np.arange(size) + 0.5) / size
    return np.meshgrid(g, g, indexing="ij")  # u rows, v cols


def simulate(x, image_size=32, n_band=4):
    """Run the analytic simulator at one input point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (D_IN,):
        raise ValueError(f"simulate: expected input of shape ({D_IN},), got {x.shape}")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError(f"simulate: input outside [0,1]^{D_IN}: {x}")

    _, rad, cx, cy, aspect, yld = latent_physics(x)
    u, v = _grid(image_size)
    profile = np.exp(-(((u - cx) ** 2) * aspect + ((v - cy) ** 2) / aspect) / (2.0 * rad ** 2))
    betas = band_attenuation(np.arange(n_band), x[0])
    images = betas[:, None, None] * yld * profile[None, :, :]

    integrals = images.mean(axis=(1, 2))
    band0 = images[0]
    total = band0.sum()
    ucm = (band0 * u).sum() / total
    vcm = (band0 * v).sum() / total
    r_eff = np.sqrt((band0 * ((u - ucm) ** 2 + (v - vcm) ** 2)).sum() / total)
    scalars = np.concatenate([integrals, [band0.max(), ucm, vcm, r_eff]])
    return Sample(x=x.copy(), images=images, scalars=scalars)


def lhs_sample(n, d, seed):
    """Latin hypercube design: per dimension, one point per equal-width bin,
    with seeded bin permutations and within-bin offsets."""
    if n < 1:
        raise ValueError(f"lhs_sample: n must be >= 1, got {n}")
    if d < 1:
        raise ValueError(f"lhs_sample: d must be >= 1, got {d}")
    rng = np.random.Generator(np.random.PCG64(seed))
    design = np.empty((n, d))
    for j in range(d):
        perm = rng.permutation(n)
        offsets = rng.random(n)
        design[:, j] = (perm + offsets) / n
    return design


@dataclass
class NormStats:
    sca_mean: np.ndarray
    sca_std: np.ndarray       # clamped stds stored as STD_CLAMP
    image_max: float

    @property
    def clamped(self):
        return self.sca_std <= STD_CLAMP


@dataclass
class Dataset:
    x: np.ndarray            # (n, d_in)
    images: np.ndarray       # (n, n_band, H, W)
    scalars: np.ndarray      # (n, n_sca)
    stats: NormStats
    split: str = "train"
    design_seed: int = 0

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]


def compute_stats(images, scalars):
    mean = scalars.mean(axis=0)
    std = scalars.std(axis=0)
    std = np.where(std > STD_CLAMP, std, STD_CLAMP)
    return NormStats(sca_mean=mean, sca_std=std, image_max=float(images.max()))


def normalize(images, scalars, stats):
    """Z-score scalars, scale images by the global train max."""
    return images / stats.image_max, (scalars - stats.sca_mean) / stats.sca_std


def denormalize(images_n, scalars_n, stats):
    return images_n * stats.image_max, scalars_n * stats.sca_std + stats.sca_mean


def generate_dataset(n_train, n_val, seed, image_size=32, n_band=4):
    """LHS design of n_train+n_val points, seeded shuffle, last n_val rows
    become validation; normalization statistics from the train split only."""
    if n_train < 1 or n_val < 1:
        raise ValueError("generate_dataset: n_train and n_val must be >= 1")
    design = lhs_sample(n_train + n_val, D_IN, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    design = design[rng.permutation(n_train + n_val)]

    samples = [simulate(row, image_size=image_size, n_band=n_band) for row in design]
    images = np.stack([s.images for s in samples])
    scalars = np.stack([s.scalars for s in samples])

    stats = compute_stats(images[:n_train], scalars[:n_train])
    train = Dataset(design[:n_train], images[:n_train], scalars[:n_train],
                    stats, split="train", design_seed=seed)
    val = Dataset(design[n_train:], images[n_train:], scalars[n_train:],
                  stats, split="val", design_seed=seed)
    return train, val


# ----------------------------------------------------------------- persistence

def save_dataset(path, ds: Dataset):
    n, d_in = ds.x.shape
    n_band, h, w = ds.image_shape
    n_sca = ds.scalars.shape[1]
    try:
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<6I", n, d_in, n_band, h, w, n_sca))
            fh.write(ds.stats.sca_mean.astype("<f8").tobytes())
            fh.write(ds.stats.sca_std.astype("<f8").tobytes())
            fh.write(struct.pack("<d", ds.stats.image_max))
            for i in range(n):
                fh.write(ds.x[i].astype("<f8").tobytes())
                fh.write(ds.images[i].astype("<f8").tobytes())
                fh.write(ds.scalars[i].astype("<f8").tobytes())
    except OSError as exc:
        raise OSError(f"failed to write dataset to {path}: {exc}") from exc


def load_dataset(path, split="train"):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: bad dataset magic {magic!r}")
        n, d_in, n_band, h, w, n_sca = struct.unpack("<6I", fh.read(24))
        sca_mean = np.frombuffer(fh.read(8 * n_sca), dtype="<f8").copy()
        sca_std = np.frombuffer(fh.read(8 * n_sca), dtype="<f8").copy()
        (image_max,) = struct.unpack("<d", fh.read(8))
        per = d_in + n_band * h * w + n_sca
        raw = np.frombuffer(fh.read(8 * n * per), dtype="<f8")
        if raw.size != n * per:
            raise ValueError(f"{path}: truncated sample block")
        raw = raw.reshape(n, per)
    x = raw[:, :d_in].copy()
    images = raw[:, d_in:d_in + n_band * h * w].reshape(n, n_band, h, w).copy()
    scalars = raw[:, d_in + n_band * h * w:].copy()
    stats = NormStats(sca_mean=sca_mean, sca_std=sca_std, image_max=image_max)
    return Dataset(x, images, scalars, stats, split=split)
