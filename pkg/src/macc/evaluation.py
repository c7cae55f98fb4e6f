"""Quantitative evaluation: per-band image MSE, scalar R2, the scan-based
self-consistency score over held-out inverse ensembles, perturbation
sensitivity, and the small-data sweep."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .simulator import D_IN, normalize
from .surrogate import train_surrogate

SCAN_STEPS = 100
FLAG_R2 = 0.25


def r2(pred, truth):
    """Coefficient of determination 1 - SS_res/SS_tot; None when the truth
    has no variance (undefined)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"r2: pred {pred.shape} vs truth {truth.shape}")
    if truth.size < 2:
        raise ValueError("r2: need at least 2 points")
    ss_tot = ((truth - truth.mean()) ** 2).sum()
    if ss_tot == 0.0:
        return None
    ss_res = ((pred - truth) ** 2).sum()
    return 1.0 - ss_res / ss_tot


def predict_val_images(surrogate, decoder, x, batch=256):
    out = []
    for lo in range(0, x.shape[0], batch):
        rimg, _ = decoder.decode(surrogate.predict(x[lo:lo + batch]))
        out.append(rimg)
    return np.concatenate(out, axis=0)


def predict_val_scalars(surrogate, decoder, x, batch=256):
    out = []
    for lo in range(0, x.shape[0], batch):
        _, rsca = decoder.decode(surrogate.predict(x[lo:lo + batch]))
        out.append(rsca)
    return np.concatenate(out, axis=0)


def mse_per_band(surrogate, decoder, val):
    """Per-band (mean, std) of the per-sample image MSE over the val split."""
    if val.n == 0:
        raise ValueError("mse_per_band: empty validation set")
    va_img, _ = normalize(val.images, val.scalars, val.stats)
    pred = predict_val_images(surrogate, decoder, val.x)
    per_sample = ((pred - va_img) ** 2).mean(axis=(2, 3))  # (n, n_band)
    return [(float(m), float(s)) for m, s in zip(per_sample.mean(axis=0),
                                                 per_sample.std(axis=0))]


def mean_r2_scalars(surrogate, decoder, val):
    """Mean R2 across scalar outputs; zero-variance scalars are skipped."""
    _, va_sca = normalize(val.images, val.scalars, val.stats)
    pred = predict_val_scalars(surrogate, decoder, val.x)
    scores = [r2(pred[:, j], va_sca[:, j]) for j in range(va_sca.shape[1])]
    kept = [s for s in scores if s is not None]
    return (float(np.mean(kept)) if kept else None), scores


@dataclass
class ScanSet:
    base: np.ndarray        # (d_in,)
    dim: int
    points: np.ndarray      # (SCAN_STEPS, d_in)


def make_scan_set(base, dim, steps=SCAN_STEPS):
    base = np.asarray(base, dtype=np.float64)
    points = np.tile(base, (steps, 1))
    points[:, dim] = np.linspace(0.0, 1.0, steps)
    return ScanSet(base=base, dim=dim, points=points)


def make_scan_sets(seed, bases_per_dim=20, d_in=D_IN, steps=SCAN_STEPS):
    from .simulator import lhs_sample
    sets = []
    for dim in range(d_in):
        bases = lhs_sample(bases_per_dim, d_in, seed + dim)
        for b in bases:
            sets.append(make_scan_set(b, dim, steps))
    return sets


@dataclass
class ConsistencyResult:
    member_r2: list            # per member: mean scan R2 on the scanned dim
    member_r2_all_dims: list   # diagnostic: R2 over all input dims
    flagged: list              # per member: fraction of scans with R2 < FLAG_R2
    n_members: int

    @property
    def score_sum(self):
        return float(np.sum(self.member_r2))

    @property
    def score_mean(self):
        return float(np.mean(self.member_r2))


def consistency_score(surrogate, decoder, members, scan_sets):
    """Parameter-recovery R2 through the forward -> decode -> inverse cycle,
    per held-out ensemble member, averaged over scan sets.  Reported both as
    the sum over members and the member mean."""
    if not members:
        raise ValueError("consistency_score: empty ensemble")
    recovered = []
    for ss in scan_sets:
        rimg, rsca = decoder.decode(surrogate.predict(ss.points))
        recovered.append((rimg, rsca))
    member_r2, member_all, flagged = [], [], []
    for m in members:
        per_scan, per_scan_all = [], []
        for ss, (rimg, rsca) in zip(scan_sets, recovered):
            xcyc = m.inverse.predict(rimg, rsca)
            score = r2(xcyc[:, ss.dim], ss.points[:, ss.dim])
            per_scan.append(score if score is not None else 0.0)
            # diagnostic variant over all input dims jointly (off-scan dims
            # are constant in the truth, so per-dim R2 is undefined there)
            per_scan_all.append(r2(xcyc.ravel(), ss.points.ravel()))
        member_r2.append(float(np.mean(per_scan)))
        member_all.append(float(np.mean(per_scan_all)))
        flagged.append(float(np.mean([s < FLAG_R2 for s in per_scan])))
    return ConsistencyResult(member_r2, member_all, flagged, len(members))


def perturbation_test(surrogate, decoder, val, sigma, seed, *, train=None):
    """Mean increase in decoded-image MSE when inputs are jittered by
    sigma * U[-1,1]^d (clipped to the unit box).  Optionally warns when the
    perturbation size exceeds the train-set nearest-neighbor distance."""
    if sigma < 0:
        raise ValueError("perturbation_test: sigma must be >= 0")
    va_img, _ = normalize(val.images, val.scalars, val.stats)
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.uniform(-1.0, 1.0, size=val.x.shape)
    x_pert = np.clip(val.x + sigma * noise, 0.0, 1.0)

    clean = predict_val_images(surrogate, decoder, val.x)
    pert = predict_val_images(surrogate, decoder, x_pert)
    mse_clean = ((clean - va_img) ** 2).mean(axis=(1, 2, 3))
    mse_pert = ((pert - va_img) ** 2).mean(axis=(1, 2, 3))
    sensitivity = float((mse_pert - mse_clean).mean())

    if train is not None and sigma > 0:
        mean_shift = float(np.linalg.norm(x_pert - val.x, axis=1).mean())
        nn_dist = _mean_nn_distance(val.x, train.x)
        if mean_shift >= nn_dist:
            warnings.warn(
                f"perturbation size {mean_shift:.4f} exceeds mean train nearest-neighbor "
                f"distance {nn_dist:.4f}; results may not reflect local robustness")
    return sensitivity


def _mean_nn_distance(points, pool, block=256):
    dists = []
    for lo in range(0, points.shape[0], block):
        chunk = points[lo:lo + block]
        d2 = ((chunk[:, None, :] - pool[None, :, :]) ** 2).sum(axis=2)
        dists.append(np.sqrt(d2.min(axis=1)))
    return float(np.concatenate(dists).mean())


def small_data_sweep(train, val, enc, dec, inv_builder, *, fractions,
                     lambdas, seeds, train_kwargs=None, log_cb=None):
    """Val image MSE per (fraction, lambda, seed); the autoencoder stays
    full-trained, surrogate arms see only a seeded subset.

    inv_builder(subset) must return a fresh pre-trained inverse for the
    subset (the warm start the joint stage expects).
    """
    train_kwargs = dict(train_kwargs or {})
    rows = []
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"small_data_sweep: fraction {fraction} outside (0, 1]")
        k = max(1, int(round(fraction * train.n)))
        subset_rng = np.random.Generator(np.random.PCG64(10_000 + int(fraction * 1000)))
        subset = np.sort(subset_rng.permutation(train.n)[:k])
        for seed in seeds:
            for lam in lambdas:
                inv = inv_builder(subset)
                sur, _, _ = train_surrogate(train, val, enc, dec, inv,
                                            lambda_cyc=lam, seed=seed,
                                            subset=subset, **train_kwargs)
                bands = mse_per_band(sur, dec, val)
                img_mse = float(np.mean([m for m, _ in bands]))
                rows.append({"fraction": fraction, "lambda_cyc": lam,
                             "seed": seed, "val_image_mse": img_mse})
                if log_cb:
                    log_cb(rows[-1])
    return rows


@dataclass
class MetricsReport:
    seed: int
    config_hash: str
    band_mse: list                   # [(mean, std), ...]
    mean_r2_scalars: float | None
    scalar_r2: list
    consistency_sum: float | None = None
    consistency_mean: float | None = None
    n_members: int | None = None
    perturbation_sensitivity: float | None = None
    sigma: float | None = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        out = [("seed", self.seed), ("config_hash", self.config_hash)]
        for k, (m, s) in enumerate(self.band_mse):
            out += [(f"mse_image_band{k}_mean", m), (f"mse_image_band{k}_std", s)]
        out.append(("mean_r2_scalars",
                    "" if self.mean_r2_scalars is None else self.mean_r2_scalars))
        for j, s in enumerate(self.scalar_r2):
            out.append((f"r2_scalar_{j}", "" if s is None else s))
        if self.consistency_sum is not None:
            out += [("consistency_score_sum", self.consistency_sum),
                    ("consistency_score_mean", self.consistency_mean),
                    ("consistency_n_members", self.n_members)]
        if self.perturbation_sensitivity is not None:
            out += [("perturbation_sensitivity", self.perturbation_sensitivity),
                    ("perturbation_sigma", self.sigma)]
        out += sorted(self.extra.items())
        return out


def write_metrics_csv(path, report: MetricsReport):
    rows = report.rows()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([k for k, _ in rows])
        writer.writerow([v for _, v in rows])
    return path
