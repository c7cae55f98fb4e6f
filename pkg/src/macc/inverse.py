"""Pseudo-inverse network G: outputs -> input parameters, plus bootstrap
ensembles of independently trained inverses for the self-consistency test.

G is deterministic by construction; where the true posterior is multi-valued
it collapses to one solution, which is accepted rather than mitigated.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .simulator import D_IN, normalize


@dataclass
class InverseLossTerms:
    regression: float
    latent_cycle: float
    total: float


class Inverse:
    """4 stride-2 convs over the images, a scalar branch, concat merge, then
    4 fully-connected layers down to the input dimension with a sigmoid."""

    def __init__(self, image_size=32, n_band=4, n_sca=8, d_out=D_IN, rng=None):
        if image_size % 16 != 0:
            raise ValueError("inverse: image_size must be divisible by 16")
        self.image_size, self.n_band, self.n_sca, self.d_out = image_size, n_band, n_sca, d_out
        side = image_size // 16
        self.conv_flat = 64 * side * side
        self.conv_branch = nn.Sequential([
            nn.Conv2d(n_band, 16, 3, stride=2, pad=1, rng=rng, name="inv.conv1"),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, pad=1, rng=rng, name="inv.conv2"),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, pad=1, rng=rng, name="inv.conv3"),
            nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=2, pad=1, rng=rng, name="inv.conv4"),
            nn.ReLU(),
            nn.Flatten(),
        ])
        self.sca_branch = nn.Sequential([
            nn.Dense(n_sca, 32, rng=rng, name="inv.sca1"),
            nn.ReLU(),
        ])
        self.head = nn.Sequential([
            nn.Dense(self.conv_flat + 32, 128, rng=rng, name="inv.fc1"),
            nn.ReLU(),
            nn.Dense(128, 128, rng=rng, name="inv.fc2"),
            nn.ReLU(),
            nn.Dense(128, 64, rng=rng, name="inv.fc3"),
            nn.ReLU(),
            nn.Dense(64, d_out, rng=rng, name="inv.fc4"),
            nn.Sigmoid(),
        ])

    def layers(self):
        return nn.collect_layers(self.conv_branch, self.sca_branch, self.head)

    def params(self):
        return self.conv_branch.params() + self.sca_branch.params() + self.head.params()

    def forward(self, img: Tensor, sca: Tensor) -> Tensor:
        a = self.conv_branch(img)
        b = self.sca_branch(sca)
        return self.head(ad.concat([a, b], axis=1))

    def predict(self, images, scalars):
        return self.forward(Tensor(images), Tensor(scalars)).data


def build_inverse(image_size, n_band, n_sca, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    return Inverse(image_size, n_band, n_sca, rng=rng)


def inverse_loss(inv, surrogate, decoder, z, x, lambda_cyc):
    """Joint-stage objective for G: regression of G(D(z)) onto x plus the
    latent cycle term ||z - F(G(D(z)))||^2 (element-mean normalized, same as
    the regression term so lambda_cyc is scale-free).

    Gradients are meant for G only: step only G's optimizer afterwards.
    Returns (terms, total_tensor).
    """
    if z.data.shape[0] == 0:
        raise ValueError("inverse_loss: empty batch")
    rimg, rsca = decoder.forward(z)
    xhat = inv.forward(rimg, rsca)
    reg = ad.mse(xhat, x)
    if lambda_cyc != 0.0:
        zcyc = surrogate.forward(xhat)
        latent = ad.mse(zcyc, z)
        total = ad.add(reg, ad.scale(latent, lambda_cyc))
        latent_val = latent.item()
    else:
        total = reg
        latent_val = 0.0
    return InverseLossTerms(reg.item(), latent_val, total.item()), total


def inverse_val_mse(inv, images_n, scalars_n, x, batch=256):
    se = 0.0
    for lo in range(0, x.shape[0], batch):
        sl = slice(lo, min(lo + batch, x.shape[0]))
        se += ((inv.predict(images_n[sl], scalars_n[sl]) - x[sl]) ** 2).sum()
    return se / x.size


def pretrain_inverse(train, val, *, epochs=200, patience=30, batch_size=128,
                     lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, seed=0,
                     subset=None, log_cb=None):
    """Pre-train G by plain regression on real (normalized) outputs -> x,
    with the cycle weight disabled.  `subset` restricts the train split to
    the given index array (used by bootstrap ensembles)."""
    n_band, h, w = train.image_shape
    inv = build_inverse(h, n_band, train.scalars.shape[1], seed)
    opt = nn.Adam(inv.params(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    tr_img, tr_sca = normalize(train.images, train.scalars, train.stats)
    va_img, va_sca = normalize(val.images, val.scalars, val.stats)
    idx_pool = np.arange(train.n) if subset is None else np.asarray(subset)

    rng = np.random.Generator(np.random.PCG64(seed + 1))
    log = []
    best = (np.inf, None)
    stale = 0
    for epoch in range(epochs):
        order = idx_pool[rng.permutation(idx_pool.size)]
        ep_loss = 0.0
        n_batches = 0
        for lo in range(0, order.size, batch_size):
            idx = order[lo:lo + batch_size]
            xhat = inv.forward(Tensor(tr_img[idx]), Tensor(tr_sca[idx]))
            loss = ad.mse(xhat, Tensor(train.x[idx]))
            loss.backward()
            ep_loss += loss.item()
            opt.step()
            n_batches += 1
        if not np.isfinite(ep_loss):
            raise FloatingPointError(f"inverse pre-training diverged at epoch {epoch}")
        vmse = inverse_val_mse(inv, va_img, va_sca, val.x)
        log.append((epoch, ep_loss / n_batches, vmse))
        if log_cb:
            log_cb(log[-1])
        if vmse < best[0] - 1e-12:
            best = (vmse, [p.data.copy() for p in inv.params()])
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    if best[1] is not None:
        for p, d in zip(inv.params(), best[1]):
            p.data = d.copy()
    return inv, log


@dataclass
class EnsembleMember:
    inverse: Inverse
    subset_seed: int
    fraction: float


def bootstrap_inverses(train, val, n_members, fraction, seeds, *, epochs=150,
                       patience=30, batch_size=128, lr=1e-4, beta1=0.9,
                       beta2=0.999, eps=1e-8):
    """Independently pre-trained inverses, each on a random train subset.
    These never see the surrogate, so they serve as held-out judges."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"bootstrap_inverses: fraction must be in (0, 1], got {fraction}")
    if n_members < 1:
        raise ValueError("bootstrap_inverses: n_members must be >= 1")
    if len(seeds) != n_members:
        raise ValueError("bootstrap_inverses: need one seed per member")
    members = []
    k = max(1, int(round(fraction * train.n)))
    for seed in seeds:
        rng = np.random.Generator(np.random.PCG64(seed))
        subset = np.sort(rng.permutation(train.n)[:k])
        inv, _ = pretrain_inverse(train, val, epochs=epochs, patience=patience,
                                  batch_size=batch_size, lr=lr, beta1=beta1,
                                  beta2=beta2, eps=eps, seed=seed, subset=subset)
        members.append(EnsembleMember(inv, seed, fraction))
    return members


def save_ensemble(out_dir, members):
    """Member checkpoints plus a plain-text manifest: one
    `path seed fraction` record per line."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "ensemble_manifest.txt")
    with open(manifest, "w") as fh:
        for i, m in enumerate(members):
            name = f"inverse_member_{i}.ckpt"
            nn.save_checkpoint(os.path.join(out_dir, name), m.inverse.layers())
            fh.write(f"{name} {m.subset_seed} {m.fraction}\n")
    return manifest


def load_ensemble(manifest_path, image_size, n_band, n_sca):
    base = os.path.dirname(manifest_path)
    members = []
    with open(manifest_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            name, seed, fraction = line.split()
            inv = Inverse(image_size, n_band, n_sca)
            nn.load_checkpoint(os.path.join(base, name), inv.layers())
            members.append(EnsembleMember(inv, int(seed), float(fraction)))
    return members
