"""Forward surrogate F: inputs -> latent codes, trained with the cyclical
consistency penalty, plus the conventional end-to-end baseline.

The training objective is regression of F(x) onto encoded targets z plus
lambda_cyc times the bi-directional cycle penalty; the pseudo-inverse is
co-trained on its own objective in strict alternation, with the decoder held
frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .inverse import inverse_loss
from .simulator import normalize
from .wae import Decoder


@dataclass
class CyclePenalty:
    """Bi-directional cycle residuals on one batch.

    latent_sum / input_sum are per-sample squared L2 norms summed over the
    batch (additive under batch concatenation); latent_mean / input_mean are
    the element-mean forms used inside the training objectives so the cycle
    weight stays comparable to the regression term across batch sizes and
    widths.
    """
    latent_sum: float
    input_sum: float
    latent_mean: float
    input_mean: float

    @property
    def total(self):
        return self.latent_sum + self.input_sum

    @property
    def total_mean(self):
        return self.latent_mean + self.input_mean


class Surrogate:
    """Fully-connected stack with ReLU and a tanh output into the latent box."""

    def __init__(self, d_in=5, latent_dim=32, rng=None):
        self.d_in, self.latent_dim = d_in, latent_dim
        self.net = nn.Sequential([
            nn.Dense(d_in, 128, rng=rng, name="sur.fc1"),
            nn.ReLU(),
            nn.Dense(128, 256, rng=rng, name="sur.fc2"),
            nn.ReLU(),
            nn.Dense(256, 256, rng=rng, name="sur.fc3"),
            nn.ReLU(),
            nn.Dense(256, latent_dim, rng=rng, name="sur.fc4"),
            nn.Tanh(),
        ])

    def layers(self):
        return nn.collect_layers(self.net)

    def params(self):
        return self.net.params()

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.d_in:
            raise ad.ShapeMismatchError(
                f"surrogate: expected (N, {self.d_in}) inputs, got {x.data.shape}")
        return self.net(x)

    def predict(self, x):
        return self.forward(Tensor(np.atleast_2d(x))).data


def build_surrogate(d_in, latent_dim, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    return Surrogate(d_in, latent_dim, rng=rng)


def predict_outputs(surrogate, decoder, x):
    """Decoded prediction D(F(x)) for raw input points (numpy in/out)."""
    return decoder.decode(surrogate.predict(x))


def cycle_penalty(x, z, surrogate, inv, decoder):
    """Cycle residuals on a batch: z -> D -> G -> F vs z, and
    x -> F -> D -> G vs x (no gradients retained)."""
    if x.shape[0] == 0:
        raise ValueError("cycle_penalty: empty batch")
    rimg, rsca = decoder.decode(z)
    zcyc = surrogate.predict(inv.predict(rimg, rsca))
    pimg, psca = decoder.decode(surrogate.predict(x))
    xcyc = inv.predict(pimg, psca)
    dz = ((z - zcyc) ** 2).sum(axis=1)
    dx = ((x - xcyc) ** 2).sum(axis=1)
    return CyclePenalty(latent_sum=float(dz.sum()), input_sum=float(dx.sum()),
                        latent_mean=float(dz.mean() / z.shape[1]),
                        input_mean=float(dx.mean() / x.shape[1]))


def surrogate_loss(surrogate, inv, decoder, x, z, lambda_cyc):
    """MaCC objective on one batch: regression MSE of F(x) on z plus
    lambda_cyc times the element-mean cycle penalty.

    Gradients are meant for F only: step only F's optimizer afterwards.
    Returns ((regression, latent_cycle, input_cycle), total_tensor).
    """
    if x.data.shape[0] == 0:
        raise ValueError("surrogate_loss: empty batch")
    zhat = surrogate.forward(x)
    reg = ad.mse(zhat, z)
    if lambda_cyc == 0.0:
        return (reg.item(), 0.0, 0.0), reg
    rimg, rsca = decoder.forward(z)
    zcyc = surrogate.forward(inv.forward(rimg, rsca))
    latent = ad.mse(zcyc, z)
    pimg, psca = decoder.forward(zhat)
    xcyc = inv.forward(pimg, psca)
    inputc = ad.mse(xcyc, x)
    total = ad.add(reg, ad.scale(ad.add(latent, inputc), lambda_cyc))
    return (reg.item(), latent.item(), inputc.item()), total


def encode_targets(enc, images_n, scalars_n, batch=256):
    out = []
    for lo in range(0, images_n.shape[0], batch):
        sl = slice(lo, min(lo + batch, images_n.shape[0]))
        out.append(enc.encode(images_n[sl], scalars_n[sl]))
    return np.concatenate(out, axis=0)


def surrogate_val_metrics(surrogate, decoder, x, z, images_n, batch=256):
    """(latent regression MSE, decoded image MSE) on a validation split."""
    reg_se = img_se = 0.0
    for lo in range(0, x.shape[0], batch):
        sl = slice(lo, min(lo + batch, x.shape[0]))
        zhat = surrogate.predict(x[sl])
        reg_se += ((zhat - z[sl]) ** 2).sum()
        rimg, _ = decoder.decode(zhat)
        img_se += ((rimg - images_n[sl]) ** 2).sum()
    return reg_se / z.size, img_se / images_n.size


def train_surrogate(train, val, enc, dec, inv, *, lambda_cyc=0.05, epochs=60,
                    batch_size=128, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                    seed=0, subset=None, log_cb=None):
    """Joint stage: per mini-batch one F update on the MaCC objective, then
    one G update on the inverse objective, alternating.  Encoder and decoder
    stay frozen; z targets are encoded once up front.

    Returns (surrogate, co-trained inverse, log rows).
    """
    if lambda_cyc < 0:
        raise ValueError("train_surrogate: lambda_cyc must be >= 0")
    n_band, h, w = train.image_shape
    surrogate = build_surrogate(train.x.shape[1], enc.latent_dim, seed)
    f_opt = nn.Adam(surrogate.params(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    g_opt = nn.Adam(inv.params(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    tr_img, tr_sca = normalize(train.images, train.scalars, train.stats)
    va_img, va_sca = normalize(val.images, val.scalars, val.stats)
    z_train = encode_targets(enc, tr_img, tr_sca)
    z_val = encode_targets(enc, va_img, va_sca)
    frozen = enc.params() + dec.params()

    idx_pool = np.arange(train.n) if subset is None else np.asarray(subset)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    log = []
    snap = [p.data.copy() for p in surrogate.params() + inv.params()]
    for epoch in range(epochs):
        order = idx_pool[rng.permutation(idx_pool.size)]
        ep = np.zeros(5)
        n_batches = 0
        for lo in range(0, order.size, batch_size):
            idx = order[lo:lo + batch_size]
            xb, zb = Tensor(train.x[idx]), Tensor(z_train[idx])

            terms, total = surrogate_loss(surrogate, inv, dec, xb, zb, lambda_cyc)
            total.backward()
            f_opt.step()
            nn.zero_grads(inv.params() + frozen)

            gterms, gtotal = inverse_loss(inv, surrogate, dec, zb, xb, lambda_cyc)
            gtotal.backward()
            g_opt.step()
            nn.zero_grads(surrogate.params() + frozen)

            ep += [*terms, gterms.regression, gterms.latent_cycle]
            n_batches += 1
        if not np.isfinite(ep).all():
            for p, d in zip(surrogate.params() + inv.params(), snap):
                p.data = d.copy()
            raise FloatingPointError(
                f"surrogate training diverged at epoch {epoch}; parameters rolled back")
        snap = [p.data.copy() for p in surrogate.params() + inv.params()]
        vreg, vimg = surrogate_val_metrics(surrogate, dec, val.x, z_val, va_img)
        row = (epoch, *(ep / n_batches), vreg, vimg)
        log.append(row)
        if log_cb:
            log_cb(row)
    return surrogate, inv, log


def build_baseline(d_in, latent_dim, image_size, n_band, n_sca, seed):
    """Same stack shapes as the MaCC path (surrogate + decoder) but randomly
    initialized and trained end-to-end; parameter count matches exactly."""
    rng = np.random.Generator(np.random.PCG64(seed))
    surrogate = Surrogate(d_in, latent_dim, rng=rng)
    head = Decoder(latent_dim, image_size, n_band, n_sca, rng=rng)
    return surrogate, head


def param_count(*models):
    return sum(p.data.size for m in models for p in m.params())


def train_baseline(train, val, *, latent_dim=32, gamma_s=1e2, epochs=60,
                   batch_size=128, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                   seed=0, subset=None, log_cb=None):
    """End-to-end x -> outputs baseline with the same reconstruction terms as
    the autoencoder objective (no adversarial term) and lambda_cyc = 0."""
    n_band, h, w = train.image_shape
    surrogate, head = build_baseline(train.x.shape[1], latent_dim, h, n_band,
                                     train.scalars.shape[1], seed)
    opt = nn.Adam(surrogate.params() + head.params(), lr=lr, beta1=beta1,
                  beta2=beta2, eps=eps)

    tr_img, tr_sca = normalize(train.images, train.scalars, train.stats)
    va_img, va_sca = normalize(val.images, val.scalars, val.stats)

    idx_pool = np.arange(train.n) if subset is None else np.asarray(subset)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    log = []
    for epoch in range(epochs):
        order = idx_pool[rng.permutation(idx_pool.size)]
        ep = np.zeros(2)
        n_batches = 0
        for lo in range(0, order.size, batch_size):
            idx = order[lo:lo + batch_size]
            pimg, psca = head.forward(surrogate.forward(Tensor(train.x[idx])))
            img_term = ad.sq_norm_mean(pimg, Tensor(tr_img[idx]))
            sca_term = ad.sq_norm_mean(psca, Tensor(tr_sca[idx]))
            total = ad.add(img_term, ad.scale(sca_term, gamma_s))
            total.backward()
            ep += [img_term.item(), sca_term.item()]
            opt.step()
            n_batches += 1
        if not np.isfinite(ep).all():
            raise FloatingPointError(f"baseline training diverged at epoch {epoch}")
        img_se = sca_se = 0.0
        for lo in range(0, val.n, 256):
            sl = slice(lo, min(lo + 256, val.n))
            rimg, rsca = predict_outputs(surrogate, head, val.x[sl])
            img_se += ((rimg - va_img[sl]) ** 2).sum()
            sca_se += ((rsca - va_sca[sl]) ** 2).sum()
        row = (epoch, *(ep / n_batches), img_se / va_img.size, sca_se / va_sca.size)
        log.append(row)
        if log_cb:
            log_cb(row)
    return surrogate, head, log
