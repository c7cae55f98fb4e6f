"""Multi-modal Wasserstein autoencoder with an adversarial uniform latent prior.

Encoder: conv branch over the band images + fully-connected branch over the
scalars, merged into a tanh latent (so codes live inside the prior's support
[-1,1]^L).  Decoder mirrors with transposed convolutions; image head ends in
a sigmoid, scalar head is linear.  A small discriminator classifies latent
codes against uniform prior draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class TrainRow:
    epoch: int
    image_term: float
    scalar_term: float
    adv_term: float
    total: float
    disc_loss: float
    val_image_mse: float
    val_scalar_mse: float


class Encoder:
    def __init__(self, latent_dim=32, image_size=32, n_band=4, n_sca=8, rng=None):
        if image_size % 8 != 0:
            raise ValueError("encoder: image_size must be divisible by 8")
        self.latent_dim = latent_dim
        self.image_size, self.n_band, self.n_sca = image_size, n_band, n_sca
        side = image_size // 8
        self.conv_flat = 64 * side * side
        self.conv_branch = nn.Sequential([
            nn.Conv2d(n_band, 16, 3, stride=2, pad=1, rng=rng, name="enc.conv1"),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, pad=1, rng=rng, name="enc.conv2"),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, pad=1, rng=rng, name="enc.conv3"),
            nn.ReLU(),
            nn.Flatten(),
        ])
        self.sca_branch = nn.Sequential([
            nn.Dense(n_sca, 32, rng=rng, name="enc.sca1"),
            nn.ReLU(),
            nn.Dense(32, 32, rng=rng, name="enc.sca2"),
            nn.ReLU(),
        ])
        self.merge = nn.Sequential([
            nn.Dense(self.conv_flat + 32, latent_dim, rng=rng, name="enc.merge"),
            nn.Tanh(),
        ])

    def layers(self):
        return nn.collect_layers(self.conv_branch, self.sca_branch, self.merge)

    def params(self):
        return self.conv_branch.params() + self.sca_branch.params() + self.merge.params()

    def forward(self, img: Tensor, sca: Tensor) -> Tensor:
        a = self.conv_branch(img)
        b = self.sca_branch(sca)
        return self.merge(ad.concat([a, b], axis=1))

    def encode(self, images, scalars):
        """Numpy in, numpy out; no gradients recorded past the return."""
        return self.forward(Tensor(images), Tensor(scalars)).data


class Decoder:
    def __init__(self, latent_dim=32, image_size=32, n_band=4, n_sca=8, rng=None):
        if image_size % 8 != 0:
            raise ValueError("decoder: image_size must be divisible by 8")
        self.latent_dim = latent_dim
        self.image_size, self.n_band, self.n_sca = image_size, n_band, n_sca
        side = image_size // 8
        self.fc = nn.Sequential([
            nn.Dense(latent_dim, 64 * side * side, rng=rng, name="dec.fc"),
            nn.ReLU(),
            nn.Reshape(64, side, side),
        ])
        self.deconv = nn.Sequential([
            nn.ConvTranspose2d(64, 32, 3, stride=2, pad=1, out_pad=1, rng=rng, name="dec.tconv1"),
            nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 3, stride=2, pad=1, out_pad=1, rng=rng, name="dec.tconv2"),
            nn.ReLU(),
            nn.ConvTranspose2d(16, n_band, 3, stride=2, pad=1, out_pad=1, rng=rng, name="dec.tconv3"),
            nn.Sigmoid(),
        ])
        self.sca_head = nn.Sequential([
            nn.Dense(latent_dim, 32, rng=rng, name="dec.sca1"),
            nn.ReLU(),
            nn.Dense(32, n_sca, rng=rng, name="dec.sca2"),
        ])

    def layers(self):
        return nn.collect_layers(self.fc, self.deconv, self.sca_head)

    def params(self):
        return self.fc.params() + self.deconv.params() + self.sca_head.params()

    def forward(self, z: Tensor):
        if z.data.ndim != 2 or z.data.shape[1] != self.latent_dim:
            raise ad.ShapeMismatchError(
                f"decoder: expected (N, {self.latent_dim}) latent, got {z.data.shape}")
        img = self.deconv(self.fc(z))
        sca = self.sca_head(z)
        return img, sca

    def decode(self, z):
        img, sca = self.forward(Tensor(np.atleast_2d(z)))
        return img.data, sca.data


class Discriminator:
    def __init__(self, latent_dim=32, rng=None):
        self.latent_dim = latent_dim
        self.net = nn.Sequential([
            nn.Dense(latent_dim, 64, rng=rng, name="disc.fc1"),
            nn.ReLU(),
            nn.Dense(64, 64, rng=rng, name="disc.fc2"),
            nn.ReLU(),
            nn.Dense(64, 1, rng=rng, name="disc.fc3"),
            nn.Sigmoid(),
        ])

    def layers(self):
        return nn.collect_layers(self.net)

    def params(self):
        return self.net.params()

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


def build_wae(latent_dim, image_size, n_band, n_sca, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    enc = Encoder(latent_dim, image_size, n_band, n_sca, rng=rng)
    dec = Decoder(latent_dim, image_size, n_band, n_sca, rng=rng)
    disc = Discriminator(latent_dim, rng=rng)
    return enc, dec, disc


def wae_loss(enc, dec, disc, img, sca, gamma_s, gamma_a):
    """Autoencoder objective: per-sample squared-norm reconstruction terms
    (batch mean) plus the non-saturating adversarial term.

    Returns (image_term, scalar_term, adv_term, total) as graph tensors with
    total = image + gamma_s * scalar + gamma_a * adv exactly.
    """
    if img.data.shape[0] == 0:
        raise ValueError("wae_loss: empty batch")
    z = enc.forward(img, sca)
    rimg, rsca = dec.forward(z)
    image_term = ad.sq_norm_mean(rimg, img)
    scalar_term = ad.sq_norm_mean(rsca, sca)
    adv_term = ad.bce(disc.forward(z), 1.0)
    total = ad.add(image_term,
                   ad.add(ad.scale(scalar_term, gamma_s), ad.scale(adv_term, gamma_a)))
    return image_term, scalar_term, adv_term, total


def discriminator_loss(disc, z_real, z_fake):
    """Cross-entropy on prior draws (label 1) vs encoded codes (label 0)."""
    real = ad.bce(disc.forward(z_real), 1.0)
    fake = ad.bce(disc.forward(z_fake), 0.0)
    return ad.scale(ad.add(real, fake), 0.5)


def discriminator_step(enc, disc, disc_opt, img_np, sca_np, rng):
    """One Adam step on the discriminator; encoder codes are detached."""
    z_fake = Tensor(enc.encode(img_np, sca_np))
    z_real = Tensor(rng.uniform(-1.0, 1.0, size=z_fake.data.shape))
    loss = discriminator_loss(disc, z_real, z_fake)
    loss.backward()
    val = loss.item()
    disc_opt.step()
    return val


def reconstruction_mse(enc, dec, images, scalars, batch=256):
    """Plain per-element MSE of the reconstruction, both modalities."""
    img_se = sca_se = 0.0
    n = images.shape[0]
    for lo in range(0, n, batch):
        sl = slice(lo, min(lo + batch, n))
        z = enc.encode(images[sl], scalars[sl])
        rimg, rsca = dec.decode(z)
        img_se += ((rimg - images[sl]) ** 2).sum()
        sca_se += ((rsca - scalars[sl]) ** 2).sum()
    return img_se / images.size, sca_se / scalars.size


def train_autoencoder(train, val, *, latent_dim=32, gamma_s=1e2, gamma_a=1e-3,
                      epochs=200, patience=30, batch_size=128,
                      lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, seed=0,
                      log_cb=None):
    """Alternating discriminator / autoencoder updates per mini-batch, early
    stop on validation reconstruction MSE."""
    from .simulator import normalize

    n_band, h, w = train.image_shape
    enc, dec, disc = build_wae(latent_dim, h, n_band, train.scalars.shape[1], seed)
    ae_opt = nn.Adam(enc.params() + dec.params(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    disc_opt = nn.Adam(disc.params(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    tr_img, tr_sca = normalize(train.images, train.scalars, train.stats)
    va_img, va_sca = normalize(val.images, val.scalars, val.stats)

    rng = np.random.Generator(np.random.PCG64(seed + 1))
    log = []
    best = (np.inf, None)
    stale = 0
    for epoch in range(epochs):
        order = rng.permutation(train.n)
        ep_terms = np.zeros(4)
        ep_disc = 0.0
        n_batches = 0
        for lo in range(0, train.n, batch_size):
            idx = order[lo:lo + batch_size]
            img_np, sca_np = tr_img[idx], tr_sca[idx]
            ep_disc += discriminator_step(enc, disc, disc_opt, img_np, sca_np, rng)

            terms = wae_loss(enc, dec, disc, Tensor(img_np), Tensor(sca_np), gamma_s, gamma_a)
            terms[3].backward()
            ep_terms += [t.item() for t in terms]
            ae_opt.step()
            nn.zero_grads(disc.params())
            n_batches += 1

        vi, vs = reconstruction_mse(enc, dec, va_img, va_sca)
        if not np.isfinite(ep_terms).all():
            raise FloatingPointError(f"autoencoder diverged at epoch {epoch}: loss terms {ep_terms}")
        row = TrainRow(epoch, *(ep_terms / n_batches), ep_disc / n_batches, vi, vs)
        log.append(row)
        if log_cb:
            log_cb(row)

        score = vi + vs
        if score < best[0] - 1e-12:
            best = (score, _snapshot(enc, dec, disc))
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    if best[1] is not None:
        _restore(enc, dec, disc, best[1])
    return enc, dec, disc, log


def _snapshot(*models):
    return [[p.data.copy() for p in m.params()] for m in models]


def _restore(*args):
    models, saved = args[:-1], args[-1]
    for m, ps in zip(models, saved):
        for p, d in zip(m.params(), ps):
            p.data = d.copy()
