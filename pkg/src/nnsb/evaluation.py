"""Attacker and utility probes plus the trade-off reports built from them.

A probe is a small fixed-architecture MLP classifier trained for a fixed
number of epochs on some representation of the data; its test accuracy says
how much label information that representation still carries. The same
architecture is used for every variant so that accuracy differences reflect
the data, not the probe. Reports carry both the best test accuracy seen
across epochs and the final one: the best mirrors an attacker with early
stopping, the final exposes overfitting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .autodiff import backward
from .datasets import Dataset, inject_label_noise
from .density import SmoothingSpec
from .miloss import LatentBatch, mi_estimate
from .nn import Mlp, TrainConfig, adam_step, cross_entropy
from .pipeline import DependencySuppressor
from .seeding import derive_seed

__all__ = [
    "ProbeReport",
    "TradeoffReport",
    "MlpProbe",
    "train_probe",
    "evaluate_pipeline",
    "noisy_label_experiment",
]


@dataclass
class ProbeReport:
    best_test_accuracy: float
    final_test_accuracy: float
    curve: list[float] = field(default_factory=list)
    diverged: bool = False


@dataclass
class TradeoffReport:
    """Per-variant summary: how well attackers and utility probes do."""

    variant: str
    sensitive: ProbeReport
    target: ProbeReport
    mi_per_dim: list[float] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return abs(self.sensitive.best_test_accuracy - self.target.best_test_accuracy)

    @property
    def mi_sum(self) -> float:
        return float(sum(self.mi_per_dim))


class MlpProbe(ClassifierMixin, BaseEstimator):
    """Fixed-shape MLP classifier with an optional per-epoch eval curve.

    fit(X, y, eval_set=(X_test, y_test)) records test accuracy after each
    epoch in ``curve_``; without an eval set it just trains.
    """

    def __init__(self, hidden: tuple = (64, 64), epochs: int = 10,
                 learning_rate: float = 1e-3, batch_size: int = 128, seed: int = 0):
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y, eval_set=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        cfg = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                          epochs=self.epochs, seed=self.seed)
        rng = np.random.default_rng(self.seed)
        sizes = [X.shape[1], *self.hidden, self.classes_.size]
        acts = ["relu"] * len(self.hidden) + ["identity"]
        model = Mlp.create(sizes, acts, rng)

        n = X.shape[0]
        self.curve_ = []
        self.diverged_ = False
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                idx = order[lo:lo + self.batch_size]
                loss = cross_entropy(model.forward(X[idx]), y_idx[idx])
                if not np.isfinite(loss.item()):
                    self.diverged_ = True
                    break
                adam_step(model, backward(loss), cfg)
            self.model_ = model
            if eval_set is not None:
                self.curve_.append(self.score(*eval_set))
            if self.diverged_:
                break
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        return self.model_.forward_values(np.asarray(X, dtype=np.float64))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def train_probe(x_train, y_train, x_test, y_test, **probe_params) -> ProbeReport:
    """Train a probe and report best/final test accuracy over its epochs."""
    probe = MlpProbe(**probe_params)
    probe.fit(x_train, y_train, eval_set=(x_test, y_test))
    curve = probe.curve_
    if not curve:  # diverged before the first full epoch
        return ProbeReport(0.0, 0.0, [], diverged=True)
    return ProbeReport(
        best_test_accuracy=max(curve),
        final_test_accuracy=curve[-1],
        curve=list(curve),
        diverged=probe.diverged_,
    )


def _mi_per_dimension(z_enc: np.ndarray, s: np.ndarray, rank: int, spec: SmoothingSpec) -> list[float]:
    # dimension 0 is masked to a constant and carries exactly nothing
    out = [0.0]
    for dim in range(1, z_enc.shape[1]):
        out.append(mi_estimate(LatentBatch(z_enc[:, dim], s), rank, spec))
    return out


def evaluate_pipeline(model: DependencySuppressor, dataset: Dataset,
                      mi_rank: int = 40, mi_sigma: float = 1.0,
                      seed: int = 0, **probe_params) -> dict[str, TradeoffReport]:
    """Probe raw data, reconstructions, cleaned latents and the VAE-only
    ablation for sensitive and target information; attach MI estimates.

    The sensitive probe plays the attacker; the target probe measures
    retained utility. MI per latent dimension is estimated once on the
    cleaned test latents and attached to every report.
    """
    variants = {
        "raw": (dataset.train_x, dataset.test_x),
        "x_prime": (model.transform(dataset.train_x), model.transform(dataset.test_x)),
        "z_enc": (model.transform_latent(dataset.train_x), model.transform_latent(dataset.test_x)),
        "vae_only": (model.transform_vae_only(dataset.train_x), model.transform_vae_only(dataset.test_x)),
    }
    mi_spec = SmoothingSpec.gaussian(mi_sigma, (mi_rank,))
    mi = _mi_per_dimension(variants["z_enc"][1], dataset.test_s, mi_rank, mi_spec)

    reports = {}
    for name, (tr, te) in variants.items():
        sensitive = train_probe(tr, dataset.train_s, te, dataset.test_s,
                                seed=derive_seed(seed, f"probes/{name}/sensitive"),
                                **probe_params)
        target = train_probe(tr, dataset.train_target, te, dataset.test_target,
                             seed=derive_seed(seed, f"probes/{name}/target"),
                             **probe_params)
        reports[name] = TradeoffReport(name, sensitive, target, mi_per_dim=list(mi))
    return reports


def noisy_label_experiment(model: DependencySuppressor, dataset: Dataset,
                           ratios, seed: int = 0, **probe_params) -> list[dict]:
    """Target-probe accuracy under training-label noise, raw vs transformed.

    For each ratio a fraction of training targets is replaced with random
    classes (test labels stay clean) and a target probe is trained on the
    raw images and on their invariant reconstructions. Removing the
    distracting structure should not hurt at low noise and should help at
    high noise, where the raw probe can overfit the corrupted labels via
    features unrelated to the task.
    """
    x_prime_train = model.transform(dataset.train_x)
    x_prime_test = model.transform(dataset.test_x)
    rows = []
    for i, ratio in enumerate(ratios):
        noisy = inject_label_noise(dataset, float(ratio), derive_seed(seed, f"noise/{i}"))
        raw = train_probe(noisy.train_x, noisy.train_target,
                          noisy.test_x, noisy.test_target,
                          seed=derive_seed(seed, f"noisy/{i}/raw"), **probe_params)
        transformed = train_probe(x_prime_train, noisy.train_target,
                                  x_prime_test, noisy.test_target,
                                  seed=derive_seed(seed, f"noisy/{i}/transformed"), **probe_params)
        rows.append({"ratio": float(ratio), "raw": raw, "transformed": transformed})
    return rows
