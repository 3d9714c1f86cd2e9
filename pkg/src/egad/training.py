"""Adversarial training for the BiGAN and the plain GAN baseline.

Every batch runs one discriminator update followed by one generator (and
encoder) update, each with a freshly drawn latent batch. Losses are the
standard sigmoid cross-entropies; the generator side uses the
non-saturating form. EMA shadows are refreshed after every optimizer step.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, no_grad
from .checkpoint import Checkpoint
from .errors import DataError, DivergenceError, ShapeError
from .models import HYPER, ModelBundle, RunMode, build_model
from .params import Adam, InitSpec, ema_update

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    arch: str
    epochs: int
    batch_size: int
    lr: float = 1e-5
    beta1: float = 0.5
    ema_decay: float = 0.999
    seed: int = 0
    dtype: str = "float32"
    latent_prior: str = "normal(0,1)"

    @classmethod
    def for_arch(cls, arch: str, **overrides) -> "TrainConfig":
        if arch not in HYPER:
            raise ValueError(f"unknown arch {arch!r}")
        hp = HYPER[arch]
        base = cls(arch, hp.epochs, hp.batch_size, hp.lr, hp.beta1, hp.ema_decay)
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(base, **overrides)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def sample_latent(rng: np.random.Generator, n: int, dim: int, dtype=np.float64) -> np.ndarray:
    return rng.standard_normal((n, dim)).astype(dtype)


def _check_pair(x, z):
    if x.shape[0] != z.shape[0]:
        raise ShapeError(f"batch size mismatch: x has {x.shape[0]} rows, z has {z.shape[0]}")


def _train_mode() -> RunMode:
    return RunMode(True, np.random.default_rng(0))


def bigan_losses(bundle: ModelBundle, x, z, mode: RunMode | None = None) -> tuple[Tensor, Tensor]:
    """``(loss_D, loss_EG)`` over real pairs (x, E(x)) and fake pairs (G(z), z)."""
    x, z = ad.as_tensor(x), ad.as_tensor(z)
    _check_pair(x, z)
    mode = _train_mode() if mode is None else mode
    real = bundle.discriminator_forward(x, bundle.encoder_forward(x, mode), mode)
    fake = bundle.discriminator_forward(bundle.generator_forward(z, mode), z, mode)
    loss_d = ad.add(ad.sigmoid_cross_entropy(real.logit, 1.0), ad.sigmoid_cross_entropy(fake.logit, 0.0))
    loss_eg = ad.add(ad.sigmoid_cross_entropy(real.logit, 0.0), ad.sigmoid_cross_entropy(fake.logit, 1.0))
    return loss_d, loss_eg


def gan_losses(bundle: ModelBundle, x, z, mode: RunMode | None = None) -> tuple[Tensor, Tensor]:
    """``(loss_D, loss_G)`` for the plain GAN, discriminator on x only."""
    x, z = ad.as_tensor(x), ad.as_tensor(z)
    _check_pair(x, z)
    mode = _train_mode() if mode is None else mode
    real = bundle.discriminator_forward(x, None, mode)
    fake = bundle.discriminator_forward(bundle.generator_forward(z, mode), None, mode)
    loss_d = ad.add(ad.sigmoid_cross_entropy(real.logit, 1.0), ad.sigmoid_cross_entropy(fake.logit, 0.0))
    loss_g = ad.sigmoid_cross_entropy(fake.logit, 1.0)
    return loss_d, loss_g


class Trainer:
    """Owns one bundle and its optimizers for the length of a run."""

    def __init__(self, bundle: ModelBundle, config: TrainConfig):
        self.bundle = bundle
        self.config = config
        self.opt = {
            name: Adam(net.store, lr=config.lr, beta1=config.beta1)
            for name, net in bundle.networks().items()
        }
        root = np.random.SeedSequence(config.seed)
        shuffle_seq, latent_seq, dropout_seq = root.spawn(3)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.latent_rng = np.random.default_rng(latent_seq)
        self.mode = RunMode(True, np.random.default_rng(dropout_seq))

    def _z(self, n):
        return sample_latent(self.latent_rng, n, self.bundle.latent_dim, self.bundle.dtype)

    def _update(self, names):
        for name in names:
            self.opt[name].step()
            ema_update(self.bundle.networks()[name].store, self.config.ema_decay)

    def d_step(self, x: np.ndarray) -> float:
        b, mode = self.bundle, self.mode
        z = self._z(x.shape[0])
        b.D.store.zero_grad()
        # only D is updated here, so E(x) and G(z) enter as constants
        with no_grad():
            ex = b.encoder_forward(x, mode) if b.is_bigan else None
            gz = b.generator_forward(z, mode)
        with Tape() as tape:
            real = b.discriminator_forward(x, ex, mode)
            fake = b.discriminator_forward(gz, Tensor(z) if b.is_bigan else None, mode)
            loss = ad.add(ad.sigmoid_cross_entropy(real.logit, 1.0),
                          ad.sigmoid_cross_entropy(fake.logit, 0.0))
        tape.backward(loss, wrt=list(b.D.store))
        self._update(["D"])
        return loss.item()

    def g_step(self, x: np.ndarray) -> float:
        b, mode = self.bundle, self.mode
        z = self._z(x.shape[0])
        names = ["G", "E"] if b.is_bigan else ["G"]
        for n in names:
            b.networks()[n].store.zero_grad()
        with b.D.store.frozen(), Tape() as tape:
            fake = b.discriminator_forward(b.generator_forward(z, mode),
                                           Tensor(z) if b.is_bigan else None, mode)
            loss = ad.sigmoid_cross_entropy(fake.logit, 1.0)
            if b.is_bigan:
                real = b.discriminator_forward(x, b.encoder_forward(x, mode), mode)
                loss = ad.add(ad.sigmoid_cross_entropy(real.logit, 0.0), loss)
        params = [p for n in names for p in b.networks()[n].store]
        tape.backward(loss, wrt=params)
        self._update(names)
        return loss.item()

    def epoch(self, features: np.ndarray, index: int) -> tuple[float, float]:
        bs = self.config.batch_size
        order = self.shuffle_rng.permutation(len(features))
        n_batches = len(features) // bs  # trailing short batch is dropped
        if n_batches == 0:
            raise DataError(f"training set of {len(features)} rows is smaller than one batch of {bs}")
        d_losses, g_losses = [], []
        for i in range(n_batches):
            x = features[order[i * bs:(i + 1) * bs]].astype(self.bundle.dtype, copy=False)
            try:
                ld = self.d_step(x)
                lg = self.g_step(x)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {index} batch {i}: {exc}",
                                      trace=d_losses + g_losses) from exc
            if not (np.isfinite(ld) and np.isfinite(lg)):
                raise DivergenceError(f"epoch {index} batch {i}: loss D={ld} G={lg}",
                                      trace=d_losses + g_losses)
            d_losses.append(ld)
            g_losses.append(lg)
        return float(np.mean(d_losses)), float(np.mean(g_losses))


def train(config: TrainConfig, train_data, bundle: ModelBundle | None = None,
          prep: dict | None = None, on_epoch=None) -> Checkpoint:
    """Train ``config.arch`` on normal-only data and return a checkpoint.

    ``train_data`` is a :class:`egad.data.LabeledDataset` or a bare feature
    array. Any anomaly-labelled row makes the call refuse to run.
    """
    features = getattr(train_data, "features", train_data)
    anomaly = getattr(train_data, "anomaly", None)
    if anomaly is not None and np.any(anomaly):
        raise DataError(f"training data holds {int(np.sum(anomaly))} anomaly-labelled rows; "
                        "models are trained on normal data only")
    if prep is None:
        prep = dict(getattr(train_data, "prep", {}) or {})
    dtype = np.dtype(config.dtype)
    if bundle is None:
        if config.arch not in HYPER:
            raise ValueError(f"unknown arch {config.arch!r}; pass a bundle for custom layouts")
        hp = HYPER[config.arch]
        bundle = build_model(config.arch, InitSpec(hp.init, seed=config.seed), dtype=dtype)
    features = np.asarray(features)
    trainer = Trainer(bundle, config)
    history = []
    for ep in range(config.epochs):
        ld, lg = trainer.epoch(features, ep)
        history.append((ld, lg))
        log.info("epoch %d/%d loss_D=%.5f loss_G=%.5f", ep + 1, config.epochs, ld, lg)
        if on_epoch is not None:
            on_epoch(ep, ld, lg)
    return Checkpoint(config.arch, bundle, {"train": config.to_dict(),
                                            "fingerprint": config.fingerprint()},
                      prep, config.epochs, history)
