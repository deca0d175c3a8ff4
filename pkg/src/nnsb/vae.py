"""Variational autoencoder with a label-conditioned prior.

The prior over latents is N(mu, I) with mu = [s, 0, ..., 0]: the first
latent dimension is pulled toward the sensitive label while all others stay
standard normal. This concentrates label information in dimension 0 (cheap
under the KL term there, expensive anywhere else) so that masking that
dimension later removes most of it, and it leaves the remaining dimensions
approximately Gaussian and decorrelated, which is what the neighbor-distance
density estimator needs.

The reconstruction term is a fixed-variance Gaussian likelihood, i.e. the
mean squared error over all elements.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import Tensor, add, backward, exp, gather, mul, reduce_mean, reduce_sum, square, sub
from .nn import Mlp, TrainConfig, TrainingDiverged, adam_step

__all__ = [
    "prior_mean",
    "reparameterize",
    "conditional_prior_kl",
    "reconstruction_error",
    "vae_loss",
    "encode_graph",
    "ConditionalPriorVAE",
]


def prior_mean(s: np.ndarray, latent_dim: int) -> np.ndarray:
    """Per-sample prior mean [s, 0, ..., 0] for labels s in {-1, +1}."""
    s = np.asarray(s)
    if not np.all(np.isin(s, (-1, 1))):
        raise ValueError("labels must be -1 or +1")
    target = np.zeros((s.size, latent_dim))
    target[:, 0] = s
    return target


def encode_graph(encoder: Mlp, x) -> tuple[Tensor, Tensor]:
    """Recorded encoder pass split into (mu, log_var), each [batch, D]."""
    out = encoder.forward(x)
    d = encoder.out_dim // 2
    if encoder.out_dim != 2 * d:
        raise ValueError("encoder output width must be even (mu and log-variance)")
    mu = gather(out, np.arange(d), axis=1)
    log_var = gather(out, np.arange(d, 2 * d), axis=1)
    return mu, log_var


def reparameterize(mu: Tensor, log_var: Tensor, noise: np.ndarray) -> Tensor:
    """z = mu + exp(log_var / 2) * noise; noise is a constant draw."""
    if np.shape(noise) != mu.values.shape:
        raise ValueError("noise must match the posterior shape")
    return add(mu, mul(exp(mul(log_var, 0.5)), noise))


def conditional_prior_kl(mu: Tensor, log_var: Tensor, s: np.ndarray) -> Tensor:
    """KL(q(z|x) || N([s,0,...,0], I)), averaged over the batch."""
    target = prior_mean(s, mu.values.shape[1])
    dev = sub(mu, target)
    terms = sub(sub(add(exp(log_var), square(dev)), 1.0), log_var)
    return mul(reduce_mean(reduce_sum(terms, axis=1)), 0.5)


def reconstruction_error(x, x_hat: Tensor) -> Tensor:
    """Mean squared error over every element of the batch."""
    return reduce_mean(square(sub(x_hat, x if isinstance(x, Tensor) else Tensor(x))))


def vae_loss(encoder: Mlp, decoder: Mlp, x: np.ndarray, s: np.ndarray,
             noise: np.ndarray, beta_kl: float) -> Tensor:
    """Reconstruction error plus beta_kl times the conditional-prior KL."""
    if beta_kl <= 0:
        raise ValueError("beta_kl must be > 0")
    mu, log_var = encode_graph(encoder, x)
    z = reparameterize(mu, log_var, noise)
    x_hat = decoder.forward(z)
    return add(reconstruction_error(x, x_hat), mul(conditional_prior_kl(mu, log_var, s), beta_kl))


class ConditionalPriorVAE(BaseEstimator):
    """VAE whose prior mean for latent dimension 0 equals the sensitive label.

    fit(X, s) trains encoder and decoder jointly; afterwards both are frozen
    as far as this package is concerned (downstream stages never touch them).
    encode/decode/reconstruct are plain numpy inference paths; transform
    returns the posterior mean, making the estimator usable as a feature
    extractor in sklearn pipelines.

    beta_kl trades prior matching against reconstruction; large values
    collapse the posterior onto the prior and destroy utility, so it needs
    to be balanced against the reconstruction scale of the data.
    """

    def __init__(self, latent_dim: int = 8, encoder_widths: tuple = (128, 64),
                 decoder_widths: tuple = (64, 128), activation: str = "relu",
                 beta_kl: float = 1.0, kl_warmup: float = 0.3,
                 learning_rate: float = 1e-3,
                 batch_size: int = 256, epochs: int = 60, seed: int = 0):
        self.latent_dim = latent_dim
        self.encoder_widths = encoder_widths
        self.decoder_widths = decoder_widths
        self.activation = activation
        self.beta_kl = beta_kl
        self.kl_warmup = kl_warmup
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _make_models(self, input_dim: int, rng: np.random.Generator) -> tuple[Mlp, Mlp]:
        act = self.activation
        enc_sizes = [input_dim, *self.encoder_widths, 2 * self.latent_dim]
        dec_sizes = [self.latent_dim, *self.decoder_widths, input_dim]
        enc_acts = [act] * len(self.encoder_widths) + ["identity"]
        dec_acts = [act] * len(self.decoder_widths) + ["identity"]
        return Mlp.create(enc_sizes, enc_acts, rng), Mlp.create(dec_sizes, dec_acts, rng)

    def fit(self, X, s):
        X = np.asarray(X, dtype=np.float64)
        s = np.asarray(s)
        if X.ndim != 2 or X.shape[0] != s.size:
            raise ValueError("X must be [n_samples, n_features] aligned with s")
        if not np.all(np.isin(s, (-1, 1))):
            raise ValueError("labels must be -1 or +1")
        cfg = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                          epochs=self.epochs, seed=self.seed)
        rng = np.random.default_rng(self.seed)
        encoder, decoder = self._make_models(X.shape[1], rng)

        n = X.shape[0]
        warmup_epochs = max(1, int(round(self.kl_warmup * self.epochs)))
        curve = []
        for epoch in range(self.epochs):
            # ramp the KL weight in from near zero to avoid posterior collapse
            beta = self.beta_kl * min(1.0, (epoch + 1) / warmup_epochs)
            order = rng.permutation(n)
            epoch_losses = []
            for lo in range(0, n, self.batch_size):
                idx = order[lo:lo + self.batch_size]
                noise = rng.standard_normal((idx.size, self.latent_dim))
                loss = vae_loss(encoder, decoder, X[idx], s[idx], noise, beta)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(f"VAE loss became {value} at epoch {epoch}")
                grads = backward(loss)
                adam_step(encoder, grads, cfg)
                adam_step(decoder, grads, cfg)
                epoch_losses.append(value)
            curve.append(float(np.mean(epoch_losses)))

        self.encoder_ = encoder
        self.decoder_ = decoder
        self.loss_curve_ = curve
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "encoder_"):
            raise RuntimeError("ConditionalPriorVAE is not fitted")

    def encode(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior parameters (mu, log_var) for each sample."""
        self._check_fitted()
        out = self.encoder_.forward_values(np.asarray(X, dtype=np.float64))
        return out[:, : self.latent_dim], out[:, self.latent_dim:]

    def decode(self, Z) -> np.ndarray:
        self._check_fitted()
        return self.decoder_.forward_values(np.asarray(Z, dtype=np.float64))

    def transform(self, X) -> np.ndarray:
        """Posterior mean latents (deterministic encoding)."""
        return self.encode(X)[0]

    def reconstruct(self, X, sample: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        """Decode the posterior mean, or a posterior sample when ``sample``."""
        mu, log_var = self.encode(X)
        z = mu
        if sample:
            rng = rng or np.random.default_rng(self.seed)
            z = mu + np.exp(0.5 * log_var) * rng.standard_normal(mu.shape)
        return self.decode(z)
