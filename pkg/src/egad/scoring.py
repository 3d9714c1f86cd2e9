"""Anomaly scores A(x) = alpha * L_G + (1 - alpha) * L_D.

The BiGAN gets its latent code from the encoder in one forward pass. The
AnoGAN baseline has no encoder, so each test batch first recovers z by
plain gradient descent on the same objective, then scores the result.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, no_grad
from .errors import DivergenceError, FormatError, NumericError, ShapeError
from .models import INFER, ModelBundle
from .training import sample_latent

VARIANTS = ("sigma", "fm")
SCORE_HEADER = ("id", "score", "l_g", "l_d", "variant")


@dataclass(frozen=True)
class ScoreConfig:
    alpha: float = 0.9
    variant: str = "fm"
    anogan_iters: int = 500
    anogan_lr: float = 0.01
    use_ema: bool = True
    restarts: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.anogan_iters < 1:
            raise ValueError("anogan_iters must be >= 1")
        if not self.anogan_lr > 0:
            raise ValueError("anogan_lr must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")


@dataclass
class ScoreRecord:
    sample_id: int
    score: float
    l_g: float
    l_d: float
    variant: str
    wall_ns: int = 0


def combine(l_g, l_d, alpha: float):
    return alpha * l_g + (1.0 - alpha) * l_d


# ---------------------------------------------------------------- components

def _recon(bundle: ModelBundle, z: Tensor) -> Tensor:
    return bundle.generator_forward(z, INFER)


def _l_g(bundle, x: Tensor, rec: Tensor) -> Tensor:
    x = bundle._check_x(bundle._as_input(x))
    return ad.l1_distance(x, rec, per_sample=True)


def _l_d(bundle: ModelBundle, x: Tensor, z: Tensor, rec: Tensor, variant: str,
         real_features: Tensor | None = None) -> Tensor:
    zz = z if bundle.is_bigan else None
    if variant == "sigma":
        # BiGAN: confidence on the pair (x, E(x)); AnoGAN: on the reconstruction
        probe = x if bundle.is_bigan else rec
        out = bundle.discriminator_forward(probe, zz, INFER)
        return ad.sigmoid_cross_entropy(out.logit, 1.0, reduction="none")
    if real_features is None:
        real_features = bundle.discriminator_forward(x, zz, INFER).features
    fake = bundle.discriminator_forward(rec, zz, INFER).features
    return ad.l1_distance(real_features, fake, per_sample=True)


def recon_loss(bundle: ModelBundle, x, z_hat=None) -> np.ndarray:
    """Per-sample ``||x - G(z)||_1`` with ``z = E(x)`` unless ``z_hat`` is given."""
    with no_grad():
        if z_hat is None:
            if not bundle.is_bigan:
                raise TypeError(f"{bundle.arch} has no encoder; pass z_hat")
            z_hat = bundle.encoder_forward(x, INFER)
        return _l_g(bundle, ad.as_tensor(x), _recon(bundle, ad.as_tensor(z_hat))).data


def disc_loss_sigma(bundle: ModelBundle, x, z_hat) -> np.ndarray:
    """Per-sample cross-entropy of the discriminator's real-class output."""
    with no_grad():
        z = bundle._as_input(z_hat)
        rec = None if bundle.is_bigan else _recon(bundle, z)
        return _l_d(bundle, ad.as_tensor(x), z, rec, "sigma").data


def disc_loss_fm(bundle: ModelBundle, x, z_hat) -> np.ndarray:
    """Per-sample L1 gap between starred-layer features of x and of G(z)."""
    with no_grad():
        z = bundle._as_input(z_hat)
        return _l_d(bundle, ad.as_tensor(x), z, _recon(bundle, z), "fm").data


def _records(ids, l_g, l_d, alpha, variant, wall_ns) -> list[ScoreRecord]:
    score = combine(l_g.astype(np.float64), l_d.astype(np.float64), alpha)
    per = wall_ns // max(len(ids), 1)
    return [ScoreRecord(int(i), float(s), float(g), float(d), variant, per)
            for i, s, g, d in zip(ids, score, l_g, l_d)]


# -------------------------------------------------------------------- BiGAN

def bigan_score(bundle: ModelBundle, x_batch, cfg: ScoreConfig = ScoreConfig(),
                ids=None) -> list[ScoreRecord]:
    """Score a batch with one encoder pass (the bundle should carry EMA weights)."""
    if not bundle.is_bigan:
        raise TypeError(f"bigan_score needs a BiGAN bundle, got {bundle.arch}")
    t0 = time.perf_counter_ns()
    with no_grad():
        x = ad.as_tensor(x_batch)
        z = bundle.encoder_forward(x, INFER)
        rec = _recon(bundle, z)
        l_g = _l_g(bundle, x, rec).data
        l_d = _l_d(bundle, x, z, rec, cfg.variant).data
    wall = time.perf_counter_ns() - t0
    ids = np.arange(len(l_g)) if ids is None else ids
    return _records(ids, l_g, l_d, cfg.alpha, cfg.variant, wall)


# ------------------------------------------------------------------- AnoGAN

@dataclass
class Recovery:
    z: np.ndarray
    trace: list[float] = field(default_factory=list)
    objective: np.ndarray | None = None  # per-sample objective at the final z


def recovery_objective(bundle: ModelBundle, x: Tensor, z: Tensor, alpha: float, variant: str,
                       real_features: Tensor | None = None) -> Tensor:
    """Per-sample alpha * L_G(x, G(z)) + (1 - alpha) * L_D, differentiable in z."""
    rec = _recon(bundle, z)
    l_g = _l_g(bundle, x, rec)
    l_d = _l_d(bundle, x, z, rec, variant, real_features)
    return ad.add(ad.scale(l_g, alpha), ad.scale(l_d, 1.0 - alpha))


def _recover_once(bundle, x: Tensor, z0: np.ndarray, cfg: ScoreConfig) -> Recovery:
    real_features = None
    if cfg.variant == "fm":
        with no_grad():
            real_features = bundle.discriminator_forward(x, None, INFER).features
    z = Tensor(z0.copy(), requires_grad=True)
    trace: list[float] = []
    per = None
    with bundle.G.store.frozen(), bundle.D.store.frozen():
        for it in range(cfg.anogan_iters + 1):
            z.grad = None
            try:
                with Tape() as tape:
                    per = recovery_objective(bundle, x, z, cfg.alpha, cfg.variant, real_features)
                    total = ad.sum(per)
            except NumericError as exc:
                raise DivergenceError(f"latent recovery iteration {it}: {exc}", trace) from exc
            value = float(total.data) / len(z0)
            if not np.isfinite(value):
                raise DivergenceError(f"latent recovery iteration {it}: objective {value}", trace)
            trace.append(value)
            if it == cfg.anogan_iters:
                break
            tape.backward(total, wrt=[z])
            z.data = z.data - cfg.anogan_lr * z.grad
    return Recovery(z.data, trace, per.data)


def anogan_recover_latent(bundle: ModelBundle, x, cfg: ScoreConfig = ScoreConfig(),
                          rng: np.random.Generator | None = None,
                          z0: np.ndarray | None = None) -> Recovery:
    """Find z with G(z) close to x by ``cfg.anogan_iters`` plain SGD steps.

    Each sample starts from one draw of the N(0, I) prior (``restarts`` adds
    more draws and keeps the lowest final objective per sample). The trace
    holds the batch-mean objective at every iterate, first and last included.
    ``z0`` replaces the prior draw as the starting point (restarts ignored).
    """
    if bundle.is_bigan:
        raise TypeError("latent recovery runs on a plain GAN bundle")
    x = bundle._check_x(bundle._as_input(x))
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n = x.shape[0]
    if z0 is not None:
        z0 = np.asarray(z0, dtype=bundle.dtype)
        if z0.shape != (n, bundle.latent_dim):
            raise ShapeError(f"z0 shape {z0.shape} != {(n, bundle.latent_dim)}")
        return _recover_once(bundle, x, z0, cfg)
    best = None
    for _ in range(cfg.restarts + 1):
        z0 = sample_latent(rng, n, bundle.latent_dim, bundle.dtype)
        rec = _recover_once(bundle, x, z0, cfg)
        if best is None:
            best = rec
        else:
            better = rec.objective < best.objective
            best.z[better] = rec.z[better]
            best.objective = np.where(better, rec.objective, best.objective)
    return best


def anogan_score(bundle: ModelBundle, x_batch, cfg: ScoreConfig = ScoreConfig(),
                 ids=None, rng: np.random.Generator | None = None) -> list[ScoreRecord]:
    t0 = time.perf_counter_ns()
    x = bundle._check_x(bundle._as_input(x_batch))
    found = anogan_recover_latent(bundle, x, cfg, rng)
    with no_grad():
        z = Tensor(found.z)
        rec = _recon(bundle, z)
        l_g = _l_g(bundle, x, rec).data
        l_d = _l_d(bundle, x, z, rec, cfg.variant).data
    wall = time.perf_counter_ns() - t0
    ids = np.arange(len(l_g)) if ids is None else ids
    return _records(ids, l_g, l_d, cfg.alpha, cfg.variant, wall)


def score_dataset(bundle: ModelBundle, dataset, cfg: ScoreConfig, method: str = "bigan",
                  batch_size: int = 100) -> list[ScoreRecord]:
    """Score every row in input order, keeping the short final batch."""
    from .data import batches

    records: list[ScoreRecord] = []
    rng = np.random.default_rng(cfg.seed)
    for ids, x in batches(dataset, batch_size):
        if method == "bigan":
            records += bigan_score(bundle, x, cfg, ids)
        elif method == "anogan":
            records += anogan_score(bundle, x, cfg, ids, rng)
        else:
            raise ValueError(f"unknown scoring method {method!r}")
    return records


# ---------------------------------------------------------------- score file

def write_scores(path, records, meta: dict | None = None) -> None:
    """CSV with a header line; ``meta`` goes first as ``# key=value`` lines."""
    with open(path, "w", newline="") as fh:
        for k, v in sorted((meta or {}).items()):
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for r in records:
            w.writerow((r.sample_id, repr(r.score), repr(r.l_g), repr(r.l_d), r.variant))


def read_score_meta(path) -> dict[str, str]:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
    return meta


def read_scores(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows or tuple(rows[0]) != SCORE_HEADER:
        raise FormatError(f"{path}: score file must start with header {','.join(SCORE_HEADER)}")
    out = []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(SCORE_HEADER):
            raise FormatError(f"{path}: line {k} has {len(row)} fields")
        out.append(ScoreRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]), row[4]))
    return out
