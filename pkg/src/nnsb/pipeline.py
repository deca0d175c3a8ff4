"""Two-stage dependency suppression: conditional-prior VAE, masking, and
per-dimension latent encoders trained against the neighbor-density loss.

Stage 1 trains the VAE and freezes it. Stage 2 masks latent dimension 0
(the one aligned with the sensitive label) and trains one tiny MLP per
remaining latent dimension to remove the residual label dependency of that
dimension while staying close to the identity. Per-dimension maps cannot
re-mix label information across dimensions, which is exactly why they are
preferred over one joint encoder here.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone

from .autodiff import Tensor, backward, reduce_mean, square, sub
from .density import SmoothingSpec
from .miloss import LatentBatch, LossPhase, PhaseSchedule, select_phase, training_loss
from .nn import Mlp, TrainConfig, adam_step, deserialize_mlp, serialize_mlp
from .seeding import derive_seed, rng_for
from .vae import ConditionalPriorVAE

__all__ = [
    "mask_sensitive_dim",
    "near_identity_encoder",
    "train_latent_encoder",
    "StageMissingError",
    "FingerprintMismatch",
    "DependencySuppressor",
    "export_latents",
    "CONTAINER_MAGIC",
]

CONTAINER_MAGIC = b"NNSBPACK"
_CONTAINER_VERSION = 1

MASK_VALUE = 0.0  # midpoint of the two prior means +-1


class StageMissingError(RuntimeError):
    """A pipeline stage required by this operation has not been trained."""


class FingerprintMismatch(ValueError):
    """Checkpoint was produced under a different configuration."""


def mask_sensitive_dim(z: np.ndarray) -> np.ndarray:
    """Replace latent dimension 0 with the constant midpoint of the priors."""
    z = np.array(z, dtype=np.float64, copy=True)
    z[:, 0] = MASK_VALUE
    return z


_BEND_SCALES = (0.25, 0.5, 1.0, 2.0)


def near_identity_encoder(hidden: int, rng: np.random.Generator,
                          carrier_gain: float = 0.1, noise_scale: float = 0.05) -> Mlp:
    """1 -> hidden(tanh) -> 1 MLP initialized to approximate the identity.

    Hidden unit 0 carries the input at a small gain (where tanh is nearly
    linear) and the output layer inverts that gain, giving end-to-end weight
    one. A few units are centered bends tanh(x / tau) at fixed scales: their
    output weights start at zero, so they do not perturb the identity, but
    they parameterize the canonical mode-merging direction (shifting the two
    label groups toward each other) as single coordinates, which gradient
    descent reliably finds. The remaining units get diverse random bends
    with small output weights that break the odd symmetry of the map;
    without that asymmetry the folding directions have exactly cancelling
    gradients on symmetric two-mode inputs. The output bias recenters so
    that f(0) = 0.
    """
    if hidden < len(_BEND_SCALES) + 1:
        raise ValueError(f"need at least {len(_BEND_SCALES) + 1} hidden units")
    mlp = Mlp.create([1, hidden, 1], ["tanh", "identity"], rng)
    w1, b1 = mlp.layers[0].weight, mlp.layers[0].bias
    w2, b2 = mlp.layers[1].weight, mlp.layers[1].bias
    w1.values[:] = rng.normal(0.0, 1.0, size=w1.values.shape)
    b1.values[:] = rng.normal(0.0, 1.0, size=b1.values.shape)
    w2.values[:] = rng.normal(0.0, noise_scale, size=w2.values.shape)
    w1.values[0, 0] = carrier_gain
    b1.values[0] = 0.0
    w2.values[0, 0] = 1.0 / carrier_gain
    for j, tau in enumerate(_BEND_SCALES, start=1):
        w1.values[j, 0] = 1.0 / tau
        b1.values[j] = 0.0
        w2.values[0, j] = 0.0
    b2.values[:] = 0.0
    b2.values[0] = -float(mlp.forward_values(np.zeros((1, 1)))[0, 0])
    return mlp


def train_latent_encoder(enc: Mlp, z: np.ndarray, sigma: np.ndarray, s: np.ndarray,
                         spec: SmoothingSpec, schedule: PhaseSchedule, cfg: TrainConfig,
                         rng: np.random.Generator, proximity_weight: float):
    """Train one scalar encoder to strip label dependency from its dimension.

    Each epoch redraws latents z + sigma * noise (the posterior scale) and
    walks balanced minibatches; the loss is the phase-selected dependency
    term plus proximity_weight times the squared deviation from the identity
    map. Minibatches are kept modest on purpose: their gradient noise is
    what lets the map slide off the symmetric saddle that separated label
    groups start on.

    Returns (per-step dependency losses, final phase), or (None, phase) if
    the loss diverged.
    """
    n = z.size
    pos = np.flatnonzero(s == 1)
    neg = np.flatnonzero(s == -1)
    half = cfg.batch_size // 2
    if min(pos.size, neg.size) < half:
        half = min(pos.size, neg.size)
    phase = LossPhase.SQ_DIFF
    history: list[float] = []
    curve: list[float] = []
    for _ in range(cfg.epochs):
        z_all = z + sigma * rng.standard_normal(n)
        p_order = pos[rng.permutation(pos.size)]
        n_order = neg[rng.permutation(neg.size)]
        for lo in range(0, min(pos.size, neg.size) - half + 1, half):
            idx = np.concatenate([p_order[lo:lo + half], n_order[lo:lo + half]])
            z_in = Tensor(z_all[idx][:, None])
            out = enc.forward(z_in)
            dep = training_loss(LatentBatch(out, s[idx]), phase, spec)
            loss = dep + proximity_weight * reduce_mean(square(sub(out, z_in)))
            if not np.isfinite(loss.item()):
                return None, phase
            adam_step(enc, backward(loss), cfg)
            dep_value = dep.item()
            curve.append(dep_value)
            history.append(dep_value)
            new_phase = select_phase(history, phase, schedule)
            if new_phase is not phase:
                phase = new_phase
                history = []
    return curve, phase


class DependencySuppressor(TransformerMixin, BaseEstimator):
    """Learn a transformation of inputs that hides a binary sensitive label.

    fit(X, s) runs both stages; transform(X) returns reconstructed inputs
    decoded from the cleaned latents, transform_latent(X) the cleaned latents
    themselves, and transform_vae_only(X) the ablation that masks dimension 0
    but leaves the per-dimension encoders out.

    proximity_weight is the utility/removal trade-off: each per-dimension
    encoder minimizes the dependency loss plus proximity_weight times its
    mean squared deviation from the identity.

    When ``vae`` is None a desk-scale default is constructed (small KL weight
    calibrated for mean-per-pixel reconstruction; see ConditionalPriorVAE on
    why that weight must stay small).
    """

    def __init__(self, vae: ConditionalPriorVAE | None = None,
                 proximity_weight: float = 1.0,
                 m_values: tuple = (10, 20, 40),
                 smoothing_sigma: float = 1.0,
                 sqdiff_threshold: float = 0.02,
                 sqratio_threshold: float = 0.02,
                 phase_window: int = 10,
                 epochs: int = 60,
                 learning_rate: float = 3e-3,
                 batch_size: int = 256,
                 encoder_hidden: int = 32,
                 seed: int = 0):
        self.vae = vae
        self.proximity_weight = proximity_weight
        self.m_values = m_values
        self.smoothing_sigma = smoothing_sigma
        self.sqdiff_threshold = sqdiff_threshold
        self.sqratio_threshold = sqratio_threshold
        self.phase_window = phase_window
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.encoder_hidden = encoder_hidden
        self.seed = seed

    # -- stage 1 ---------------------------------------------------------

    def _default_vae(self) -> ConditionalPriorVAE:
        return ConditionalPriorVAE(beta_kl=1e-3, epochs=150, learning_rate=3e-3,
                                   seed=derive_seed(self.seed, "vae"))

    def _fit_vae(self, X, s):
        base = self.vae if self.vae is not None else self._default_vae()
        vae = clone(base)
        vae.fit(X, s)
        self.vae_ = vae
        self.vae_checksum_ = _vae_checksum(vae)

    # -- stage 2 ---------------------------------------------------------

    def _spec(self) -> SmoothingSpec:
        return SmoothingSpec.gaussian(self.smoothing_sigma, tuple(self.m_values))

    def _schedule(self) -> PhaseSchedule:
        return PhaseSchedule(self.sqdiff_threshold, self.sqratio_threshold, self.phase_window)

    def _fit_bank(self, X, s):
        if not hasattr(self, "vae_"):
            raise StageMissingError("stage 2 requires a trained VAE")
        spec = self._spec()
        schedule = self._schedule()
        cfg = TrainConfig(learning_rate=self.learning_rate,
                          batch_size=self.batch_size, epochs=self.epochs)
        mu, log_var = self.vae_.encode(X)
        sigma = np.exp(0.5 * log_var)
        d = self.vae_.latent_dim

        encoders: list[Mlp] = []
        curves: dict[int, list[float]] = {}
        phases: dict[int, LossPhase] = {}
        for dim in range(1, d):
            rng = rng_for(self.seed, f"stage2/dim{dim}")
            enc = near_identity_encoder(self.encoder_hidden, rng)
            curve, phase = train_latent_encoder(
                enc, mu[:, dim], sigma[:, dim], s, spec, schedule, cfg, rng,
                self.proximity_weight)
            if curve is None:  # diverged; keep a fresh identity encoder
                warnings.warn(f"latent encoder for dimension {dim} diverged; left at identity",
                              RuntimeWarning)
                enc = near_identity_encoder(self.encoder_hidden, rng_for(self.seed, f"stage2/dim{dim}/reset"))
                curve, phase = [], LossPhase.SQ_DIFF
            encoders.append(enc)
            curves[dim] = curve
            phases[dim] = phase
        self.bank_ = encoders
        self.loss_curves_ = curves
        self.phases_ = phases

    # -- public API --------------------------------------------------------

    def fit(self, X, s):
        X = np.asarray(X, dtype=np.float64)
        s = np.asarray(s)
        self._fit_vae(X, s)
        self._fit_bank(X, s)
        self.n_features_in_ = X.shape[1]
        return self

    def _require(self, stage: str):
        if stage == "vae" and not hasattr(self, "vae_"):
            raise StageMissingError("VAE stage has not been trained or loaded")
        if stage == "bank" and not hasattr(self, "bank_"):
            raise StageMissingError("latent-encoder stage has not been trained or loaded")

    def transform_latent(self, X) -> np.ndarray:
        """Cleaned latents: dimension 0 masked, others passed through their
        trained encoders. Deterministic (posterior mean, no sampling)."""
        self._require("vae")
        self._require("bank")
        z = self.vae_.transform(X)
        out = mask_sensitive_dim(z)
        for dim, enc in enumerate(self.bank_, start=1):
            out[:, dim] = enc.forward_values(z[:, dim][:, None]).ravel()
        return out

    def transform(self, X) -> np.ndarray:
        """Invariant reconstructions decoded from the cleaned latents."""
        return self.vae_.decode(self.transform_latent(X))

    def transform_vae_only(self, X) -> np.ndarray:
        """Ablation: decode with dimension 0 masked but encoders left out."""
        self._require("vae")
        return self.vae_.decode(mask_sensitive_dim(self.vae_.transform(X)))

    def latent_vae(self, X) -> np.ndarray:
        self._require("vae")
        return self.vae_.transform(X)

    # -- persistence -------------------------------------------------------

    def save(self, path, config_fingerprint: str = ""):
        self._require("vae")
        if hasattr(self, "bank_") and _vae_checksum(self.vae_) != self.vae_checksum_:
            raise RuntimeError("VAE parameters changed after stage-1 training")
        fragments: dict[str, bytes] = {}
        stages = ["vae"]
        fragments["vae/encoder"] = serialize_mlp(self.vae_.encoder_)
        fragments["vae/decoder"] = serialize_mlp(self.vae_.decoder_)
        if hasattr(self, "bank_"):
            stages.append("encoders")
            for dim, enc in enumerate(self.bank_, start=1):
                fragments[f"bank/dim_{dim:03d}"] = serialize_mlp(enc)
        meta = {
            "format_version": _CONTAINER_VERSION,
            "config_fingerprint": config_fingerprint,
            "stages": stages,
            "input_dim": int(self.vae_.n_features_in_),
            "latent_dim": int(self.vae_.latent_dim),
            "vae_checksum": self.vae_checksum_,
            "vae_params": _jsonable(self.vae_.get_params()),
            "pipeline_params": _jsonable({k: v for k, v in self.get_params().items() if k != "vae"}),
        }
        fragments["meta"] = json.dumps(meta, sort_keys=True).encode()
        _write_container(path, fragments)

    @classmethod
    def load(cls, path, expected_fingerprint: str | None = None) -> "DependencySuppressor":
        fragments = _read_container(path)
        meta = json.loads(fragments["meta"].decode())
        if expected_fingerprint is not None and meta["config_fingerprint"] != expected_fingerprint:
            raise FingerprintMismatch(
                f"checkpoint fingerprint {meta['config_fingerprint']!r} does not match "
                f"configuration {expected_fingerprint!r}")
        params = dict(meta["pipeline_params"])
        params["m_values"] = tuple(params.get("m_values", ()))
        vae = ConditionalPriorVAE(**{
            k: (tuple(v) if isinstance(v, list) else v)
            for k, v in meta["vae_params"].items()})
        model = cls(vae=vae, **params)
        model.vae_ = clone(vae)
        model.vae_.encoder_ = deserialize_mlp(fragments["vae/encoder"])
        model.vae_.decoder_ = deserialize_mlp(fragments["vae/decoder"])
        model.vae_.n_features_in_ = meta["input_dim"]
        model.vae_checksum_ = meta["vae_checksum"]
        if _vae_checksum(model.vae_) != meta["vae_checksum"]:
            raise ValueError("VAE fragments do not match the stored checksum")
        if "encoders" in meta["stages"]:
            bank = []
            for dim in range(1, meta["latent_dim"]):
                bank.append(deserialize_mlp(fragments[f"bank/dim_{dim:03d}"]))
            model.bank_ = bank
        model.n_features_in_ = meta["input_dim"]
        return model


def _vae_checksum(vae: ConditionalPriorVAE) -> str:
    digest = hashlib.sha256()
    digest.update(serialize_mlp(vae.encoder_))
    digest.update(serialize_mlp(vae.decoder_))
    return digest.hexdigest()


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        if isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out


# container: magic | u32 version | u32 count | per fragment:
#   u16 name length | name utf-8 | u64 offset | u64 length
# fragment bytes follow in directory order


def _write_container(path, fragments: dict[str, bytes]):
    names = sorted(fragments)
    header = [CONTAINER_MAGIC, struct.pack("<II", _CONTAINER_VERSION, len(names))]
    dir_size = sum(2 + len(n.encode()) + 16 for n in names)
    offset = len(CONTAINER_MAGIC) + 8 + dir_size
    for name in names:
        blob = fragments[name]
        enc = name.encode()
        header.append(struct.pack("<H", len(enc)))
        header.append(enc)
        header.append(struct.pack("<QQ", offset, len(blob)))
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        for name in names:
            fh.write(fragments[name])


def _read_container(path) -> dict[str, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version, count = struct.unpack_from("<II", data, len(CONTAINER_MAGIC))
    if version != _CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    pos = len(CONTAINER_MAGIC) + 8
    fragments = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode()
        pos += name_len
        offset, length = struct.unpack_from("<QQ", data, pos)
        pos += 16
        fragments[name] = data[offset:offset + length]
    return fragments


def export_latents(model: DependencySuppressor, X, s, target, path):
    """CSV of raw and cleaned latents per sample, 12 significant digits."""
    import csv

    z_vae = model.latent_vae(X)
    z_enc = model.transform_latent(X)
    d = z_vae.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "s", "target"]
                        + [f"z_vae_{i}" for i in range(d)]
                        + [f"z_enc_{i}" for i in range(d)])
        for i in range(z_vae.shape[0]):
            writer.writerow([i, int(s[i]), int(target[i])]
                            + [f"{v:.12g}" for v in z_vae[i]]
                            + [f"{v:.12g}" for v in z_enc[i]])
