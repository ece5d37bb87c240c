"""Encoder / prior network / decoder and the training objective.

Three model kinds share this code:

* ``ae``    - deterministic code ``z = mu_q``, reconstruction loss only.
* ``vae``   - isotropic N(0, I) prior, standard ELBO.
* ``mmvae`` - label-conditional prior N(mu(l), I) produced by a small prior
  network, a hinge penalty keeping modal means apart in every dimension, and
  a decoder that is also fed samples drawn from the prior modal on randomly
  chosen iterations.
"""
import dataclasses
from dataclasses import dataclass

import numpy as np

from . import __version__
from .kernels import bernoulli_logits
from .errors import ConfigurationError, DomainError, PoisonedGradientError, ShapeError, StateError
from .tensor import (AdamState, LeakyReLU, Mlp, SeededRng, adam_step, gaussian_sample, read_container,
                     sigmoid, write_container)

MODEL_KINDS = ("ae", "vae", "mmvae")
LOGVAR_BOUNDS = (-10.0, 10.0)
PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    latent_dim: int = 32
    image_side: int = 32
    voxel_side: int = 16
    num_labels: int = 8
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    separation_sigma: float = 3.0
    separation_weight: float = 1.0
    # the training hinge sits at sigma * (1 + margin); a hinge at exactly sigma stalls on the boundary
    separation_margin: float = 0.25
    kl_weight: float = 1.0
    seed: int = 0
    model_kind: str = "mmvae"
    # chance per iteration of reconstructing from the encoder rather than the prior modal
    posterior_branch_prob: float = 0.5
    encoder_hidden: tuple = (1024, 256)
    decoder_hidden: tuple = (256, 1024)
    prior_hidden: tuple = (512, 512)

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        self.prior_hidden = tuple(int(h) for h in self.prior_hidden)
        if self.model_kind not in MODEL_KINDS:
            raise ConfigurationError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        for name in ("latent_dim", "image_side", "voxel_side", "num_labels", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("lr", "separation_sigma"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.separation_weight < 0 or self.kl_weight < 0 or self.separation_margin < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not 0.0 <= self.posterior_branch_prob <= 1.0:
            raise ConfigurationError("posterior_branch_prob must lie in [0, 1]")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("encoder_hidden", "decoder_hidden", "prior_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EncoderOutput:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class PriorBank:
    """Modal means, one row per label; every modal has identity covariance."""

    means: np.ndarray
    sigma: float = 3.0

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))

    @property
    def num_labels(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    def min_separation(self) -> float:
        """Smallest per-dimension gap between any two modal means."""
        m = self.means
        if len(m) < 2:
            return np.inf
        gaps = np.abs(m[:, None, :] - m[None, :, :])
        iu = np.triu_indices(len(m), 1)
        return float(gaps[iu].min())

    def is_separated(self) -> bool:
        return self.min_separation() > self.sigma


@dataclass
class LatentStats:
    mean: np.ndarray
    variance: np.ndarray

    @classmethod
    def from_codes(cls, codes):
        codes = np.asarray(codes, dtype=np.float64)
        return cls(codes.mean(axis=0), codes.var(axis=0))


@dataclass
class LossBreakdown:
    total: float
    recon: float
    kl: float
    separation: float
    branch: str


# --- loss terms ----------------------------------------------------------------

def reparameterize(out: EncoderOutput, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != np.shape(out.mu):
        raise ShapeError(f"eps shape {eps.shape} != latent shape {np.shape(out.mu)}")
    return out.mu + np.exp(0.5 * out.logvar) * eps


def kl_term(out: EncoderOutput, mu_l) -> float:
    """KL( N(mu_q, diag exp(logvar_q)) || N(mu_l, I) ), summed over dimensions."""
    mu_q = np.asarray(out.mu, dtype=np.float64)
    lv = np.asarray(out.logvar, dtype=np.float64)
    mu_l = np.asarray(mu_l, dtype=np.float64)
    if mu_q.shape != mu_l.shape or lv.shape != mu_q.shape:
        raise ShapeError("kl_term: vector lengths disagree")
    # expm1 keeps exp(lv) - 1 - lv from cancelling below zero for tiny lv
    return float(0.5 * np.sum(np.expm1(lv) - lv + (mu_q - mu_l) ** 2))


def recon_term(predicted, target) -> float:
    """Bernoulli log-likelihood of binary ``target`` under ``predicted`` (<= 0)."""
    p = np.clip(np.asarray(predicted, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} vs target {t.shape}")
    return float(np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def _hinge(means, sigma):
    diff = means[:, None, :] - means[None, :, :]
    short = np.maximum(0.0, sigma - np.abs(diff))
    return diff, short


def separation_penalty(bank: PriorBank, sigma=None) -> float:
    """Sum over label pairs and dimensions of max(0, sigma - |gap|)^2."""
    sigma = bank.sigma if sigma is None else sigma
    if bank.num_labels < 2:
        raise DomainError("separation penalty needs at least two labels")
    _, short = _hinge(bank.means, sigma)
    # the ordered-pair matrix counts each unordered pair twice; diagonal holds sigma^2 per dim
    return float(0.5 * (np.sum(short ** 2) - bank.num_labels * bank.latent_dim * sigma ** 2))


def separation_grad(means, sigma) -> np.ndarray:
    diff, short = _hinge(means, sigma)
    idx = np.arange(means.shape[0])
    short[idx, idx, :] = 0.0
    return np.sum(-2.0 * short * np.sign(diff), axis=1)


# --- the model -------------------------------------------------------------------

class LatentModel:
    def __init__(self, config: TrainConfig):
        self.config = config
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0xA11CE])))
        N, W, D = config.latent_dim, config.image_side, config.voxel_side
        self.enc_trunk = Mlp([W * W, *config.encoder_hidden], gen)
        self.enc_act = LeakyReLU()
        h = config.encoder_hidden[-1]
        self.enc_mu = Mlp([h, N], gen)
        self.enc_logvar = Mlp([h, N], gen)
        self.decoder = Mlp([N, *config.decoder_hidden, D ** 3], gen)
        self.prior = Mlp([config.num_labels, *config.prior_hidden, N], gen) if config.model_kind == "mmvae" else None
        self.adam = AdamState(lr=config.lr)
        self.trained_steps = 0
        self.latent_stats = None

    @property
    def kind(self) -> str:
        return self.config.model_kind

    @property
    def has_prior_bank(self) -> bool:
        return self.prior is not None

    # parameters -------------------------------------------------------------
    def _modules(self):
        mods = {"encoder.trunk": self.enc_trunk, "encoder.mu": self.enc_mu,
                "encoder.logvar": self.enc_logvar, "decoder": self.decoder}
        if self.prior is not None:
            mods["prior"] = self.prior
        return mods

    def params(self) -> dict:
        return {f"{m}.{k}": v for m, mod in self._modules().items() for k, v in mod.params().items()}

    def grads(self) -> dict:
        return {f"{m}.{k}": v for m, mod in self._modules().items() for k, v in mod.grads().items()}

    # inference ----------------------------------------------------------------
    def _flatten_images(self, images):
        W = self.config.image_side
        x = np.asarray(images, dtype=np.float64)
        if x.shape[-2:] != (W, W) or x.ndim not in (2, 3):
            raise ShapeError(f"expected image(s) of shape (..., {W}, {W}), got {x.shape}")
        return x.reshape(-1, W * W), x.ndim == 2

    def encode(self, images) -> EncoderOutput:
        x, single = self._flatten_images(images)
        hidden = self.enc_act.infer(self.enc_trunk.infer(x))
        mu = self.enc_mu.infer(hidden)
        logvar = np.clip(self.enc_logvar.infer(hidden), *LOGVAR_BOUNDS)
        if single:
            return EncoderOutput(mu[0], logvar[0])
        return EncoderOutput(mu, logvar)

    def prior_bank(self) -> PriorBank:
        if self.prior is None:
            raise ConfigurationError(f"a {self.kind} model has no prior bank")
        L = self.config.num_labels
        return PriorBank(self.prior.infer(np.eye(L)), self.config.separation_sigma)

    def prior_mean(self, label: int) -> np.ndarray:
        if not 0 <= label < self.config.num_labels:
            raise DomainError(f"label {label} outside [0, {self.config.num_labels})")
        return self.prior_bank().means[label]

    def _prior_means_for(self, labels):
        if self.prior is None:
            return np.zeros((len(labels), self.config.latent_dim)), None
        bank = self.prior.forward(np.eye(self.config.num_labels))
        return bank[labels], bank

    def decode_logits(self, latent):
        z = np.asarray(latent, dtype=np.float64)
        if z.shape[-1] != self.config.latent_dim:
            raise ShapeError(f"latent length {z.shape[-1]} != {self.config.latent_dim}")
        if not np.all(np.isfinite(z)):
            raise DomainError("latent contains NaN/Inf")
        return self.decoder.infer(z)

    def decode(self, latent) -> np.ndarray:
        """Occupancy probabilities shaped ``(..., D, D, D)``."""
        D = self.config.voxel_side
        p = sigmoid(self.decode_logits(latent))
        return p.reshape(*np.shape(latent)[:-1], D, D, D)

    # training -----------------------------------------------------------------
    def loss_and_grads(self, images, labels, voxels, branch: str, eps) -> LossBreakdown:
        """Batch-mean loss; leaves parameter gradients on the layers.

        ``branch`` is ``"posterior"`` (z from the encoder) or ``"prior"``
        (z = mu(label) + eps). ``eps`` has shape ``(B, N)``.
        """
        cfg = self.config
        labels = np.asarray(labels, dtype=np.int64)
        x, _ = self._flatten_images(images)
        B = x.shape[0]
        t = np.asarray(voxels, dtype=np.float64).reshape(B, -1)

        hidden = self.enc_act.forward(self.enc_trunk.forward(x))
        mu_q = self.enc_mu.forward(hidden)
        raw_lv = self.enc_logvar.forward(hidden)
        lv = np.clip(raw_lv, *LOGVAR_BOUNDS)
        mu_l, bank = self._prior_means_for(labels)

        if self.kind == "ae":
            z = mu_q
        elif branch == "posterior":
            z = mu_q + np.exp(0.5 * lv) * eps
        elif branch == "prior" and self.kind == "mmvae":
            z = mu_l + eps
        else:
            raise ConfigurationError(f"branch {branch!r} not available for {self.kind}")

        logits = self.decoder.forward(z)
        ll, d_logits = bernoulli_logits(logits, t)
        recon = -ll.mean()
        d_logits /= B
        dz = self.decoder.backward(d_logits)

        d_mu = np.zeros_like(mu_q)
        d_lv = np.zeros_like(lv)
        d_mul = np.zeros_like(mu_l)
        kl = 0.0
        if self.kind == "ae":
            d_mu += dz
        else:
            if branch == "posterior":
                d_mu += dz
                d_lv += dz * eps * 0.5 * np.exp(0.5 * lv)
            else:
                d_mul += dz
            kw = cfg.kl_weight
            kl = float(np.mean(0.5 * np.sum(np.expm1(lv) - lv + (mu_q - mu_l) ** 2, axis=1)))
            d_mu += kw * (mu_q - mu_l) / B
            d_mul -= kw * (mu_q - mu_l) / B
            d_lv += kw * 0.5 * (np.exp(lv) - 1.0) / B

        sep = 0.0
        if bank is not None:
            d_bank = np.zeros_like(bank)
            np.add.at(d_bank, labels, d_mul)
            if cfg.num_labels >= 2 and cfg.separation_weight > 0:
                target = cfg.separation_sigma * (1.0 + cfg.separation_margin)
                sep = separation_penalty(PriorBank(bank, target))
                d_bank += cfg.separation_weight * separation_grad(bank, target)
            self.prior.backward(d_bank, input_grad=False)

        inside = (raw_lv > LOGVAR_BOUNDS[0]) & (raw_lv < LOGVAR_BOUNDS[1])
        d_hidden = self.enc_mu.backward(d_mu) + self.enc_logvar.backward(d_lv * inside)
        self.enc_trunk.backward(self.enc_act.backward(d_hidden), input_grad=False)

        total = recon + cfg.kl_weight * kl + cfg.separation_weight * sep
        for name, value in (("reconstruction", recon), ("kl", kl), ("separation", sep)):
            if not np.isfinite(value):
                raise PoisonedGradientError(f"non-finite {name} term in loss")
        return LossBreakdown(float(total), float(recon), float(kl), float(sep), branch)

    def draw_branch(self, rng: SeededRng) -> str:
        if self.kind != "mmvae":
            return "posterior"
        return "posterior" if rng.gen.uniform() < self.config.posterior_branch_prob else "prior"

    # persistence -----------------------------------------------------------------
    def save(self, path) -> None:
        arrays = dict(self.params())
        meta = {"model": {"kind": self.kind, "config": self.config.to_dict(),
                          "trained_steps": self.trained_steps, "tool_version": __version__}}
        meta["adam"] = {"step_count": self.adam.step_count, "lr": self.adam.lr, "beta1": self.adam.beta1,
                        "beta2": self.adam.beta2, "epsilon": self.adam.epsilon}
        for name in self.adam.first_moment:
            arrays[f"adam.m.{name}"] = self.adam.first_moment[name]
            arrays[f"adam.v.{name}"] = self.adam.second_moment[name]
        if self.has_prior_bank:
            bank = self.prior_bank()
            meta["prior_bank"] = {"num_labels": bank.num_labels, "latent_dim": bank.latent_dim,
                                  "sigma": bank.sigma}
            arrays["prior_bank.means"] = bank.means
        if self.latent_stats is not None:
            arrays["latent_stats.mean"] = self.latent_stats.mean
            arrays["latent_stats.variance"] = self.latent_stats.variance
        write_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "LatentModel":
        arrays, meta = read_container(path)
        if "model" not in meta:
            raise ConfigurationError(f"{path}: checkpoint has no model section")
        model = cls(TrainConfig.from_dict(meta["model"]["config"]))
        for name, arr in model.params().items():
            if name not in arrays:
                raise ConfigurationError(f"{path}: missing parameter {name}")
            if arrays[name].shape != arr.shape:
                raise ShapeError(f"{path}: {name} has shape {arrays[name].shape}, expected {arr.shape}")
            arr[...] = arrays[name]
        model.trained_steps = int(meta["model"]["trained_steps"])
        a = meta.get("adam", {})
        model.adam.step_count = int(a.get("step_count", 0))
        for name in model.params():
            if f"adam.m.{name}" in arrays:
                model.adam.first_moment[name] = arrays[f"adam.m.{name}"].copy()
                model.adam.second_moment[name] = arrays[f"adam.v.{name}"].copy()
        if "latent_stats.mean" in arrays:
            model.latent_stats = LatentStats(arrays["latent_stats.mean"], arrays["latent_stats.variance"])
        return model


def load_prior_bank(path) -> PriorBank:
    """Decoder-side read of the prior bank section alone."""
    arrays, meta = read_container(path)
    if "prior_bank" not in meta:
        raise ConfigurationError(f"{path}: checkpoint carries no prior bank")
    return PriorBank(arrays["prior_bank.means"], meta["prior_bank"]["sigma"])


# --- training loop ----------------------------------------------------------------

def train_step(model: LatentModel, images, labels, voxels, rng: SeededRng) -> LossBreakdown:
    branch = model.draw_branch(rng)
    eps = gaussian_sample(rng, (len(labels), model.config.latent_dim))
    loss = model.loss_and_grads(images, labels, voxels, branch, eps)
    params = model.params()
    adam_step(params, model.grads(), model.adam)
    model.trained_steps += 1
    return loss


def train(model: LatentModel, images, labels, voxels, epochs=None, on_epoch=None):
    """Mini-batch training; returns per-epoch mean losses as a list of dicts."""
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    rng = SeededRng(cfg.seed)
    n = len(labels)
    if n == 0:
        raise StateError("training performed no steps: empty training set")
    history = []
    start = model.trained_steps
    for epoch in range(epochs):
        order = rng.gen.permutation(n)
        sums = np.zeros(4)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = train_step(model, images[idx], labels[idx], voxels[idx], rng)
            sums += len(idx) * np.array([loss.total, loss.recon, loss.kl, loss.separation])
        row = dict(zip(("total", "recon", "kl", "separation"), (sums / n).tolist()))
        row["epoch"] = epoch
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if model.trained_steps == start:
        raise StateError("training performed no steps")
    model.latent_stats = LatentStats.from_codes(encode_means(model, images))
    return history


def encode_means(model: LatentModel, images, chunk: int = 256) -> np.ndarray:
    out = [model.encode(images[lo:lo + chunk]).mu for lo in range(0, len(images), chunk)]
    return np.concatenate(out, axis=0)
