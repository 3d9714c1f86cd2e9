"""Command-line pipeline: prepare, train, score, eval, bench, reproduce.

Settings resolve in three layers: built-in defaults (the reference
hyperparameters for the chosen architecture), then a flat ``key=value``
config file given with ``--config``, then explicit flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, read_container, save_checkpoint
from .data import (
    KDD_FEATURES,
    LabeledDataset,
    encode_kdd,
    load_dataset_cache,
    load_kdd,
    load_mnist,
    make_kdd_split,
    make_mnist_split,
    save_dataset_cache,
)
from .errors import ConfigError, DataError, DivergenceError, EgadError, FormatError
from .evaluation import (
    aggregate_runs,
    average_precision,
    bench_inference,
    emit_report,
    kdd_protocol,
    render_bench,
    speedup,
)
from .models import ARCH_IDS, HYPER, build_model
from .params import InitSpec
from .scoring import (
    VARIANTS,
    ScoreConfig,
    anogan_score,
    bigan_score,
    read_score_meta,
    read_scores,
    score_dataset,
    write_scores,
)
from .training import TrainConfig, train

log = logging.getLogger("egad")

DATA_ENV = "EGAD_DATA"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# desk-scale presets: train-set size (fraction or rows) and epochs
DESK_SCALE = {"kdd": {"train_size": 0.1, "epochs": 10}, "mnist": {"train_size": 8000, "epochs": 10}}

# file names and logging switches never enter a fingerprint
UNFINGERPRINTED = frozenset({"config", "in_path", "out", "data", "checkpoint", "scores", "bigan",
                             "anogan", "out_dir", "log", "verbose", "command"})


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    def resolved(self) -> dict:
        return {k: v for k, v in sorted(self.values.items())
                if k not in UNFINGERPRINTED and v is not None}

    def fingerprint(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes equal underscores."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for num, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{num}: expected key=value, got {line!r}")
        out[key.strip().replace("-", "_")] = _coerce(value.strip())
    return out


def resolve(args: argparse.Namespace, parser_keys) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if v is not None}
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(values) - set(parser_keys))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values.update(flags)
    return RunConfig(values)


def _dataset_of(arch: str) -> str:
    return arch.split("_", 1)[0]


def _data_root() -> Path | None:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root else None


def _default_input(dataset: str) -> Path:
    root = _data_root()
    if root is None:
        raise ConfigError(f"no --in given and ${DATA_ENV} is unset")
    if dataset == "mnist":
        return root / "mnist"
    for name in ("kddcup.data_10_percent", "kddcup.data_10_percent.gz",
                 "kddcup.data_10_percent_corrected", "kdd/kddcup.data_10_percent",
                 "kdd/kddcup.data_10_percent.gz"):
        if (root / name).exists():
            return root / name
    raise DataError(f"no KDD Cup 99 10% file under ${DATA_ENV}={root}")


def _meta(cfg: RunConfig, **extra) -> dict:
    return {"fingerprint": cfg.fingerprint(), "config": json.dumps(cfg.resolved(), sort_keys=True,
                                                                    default=str), **extra}


# --------------------------------------------------------------- commands

def build_splits(dataset: str, in_path, seed: int, anomaly_digit: int = 0,
                 fit: str = "all") -> tuple[LabeledDataset, LabeledDataset]:
    if dataset == "mnist":
        return make_mnist_split(load_mnist(in_path), anomaly_digit, seed)
    raw = load_kdd(in_path)
    if fit == "train":
        # min/max from the training half only; vocab still from every row
        probe, _ = make_kdd_split(np.zeros((len(raw.labels), 1)), raw.labels, seed)
        feats, prep = encode_kdd(raw, fit_rows=probe.ids)
    else:
        feats, prep = encode_kdd(raw)
    return make_kdd_split(feats, raw.labels, seed, prep)


def cmd_prepare(cfg: RunConfig) -> dict:
    dataset = cfg["dataset"]
    in_path = cfg.get("in_path") or _default_input(dataset)
    out = Path(cfg["out"])
    fp = cfg.fingerprint()
    if out.exists():
        try:
            _, entries = read_container(out)
            old = json.loads(entries["meta/provenance"].tobytes()).get("fingerprint")
        except (FormatError, KeyError, ValueError):
            old = None
        if old == fp:
            log.info("%s is up to date (fingerprint %s)", out, fp)
            return {"out": str(out), "fingerprint": fp, "skipped": True}
    train_ds, test_ds = build_splits(dataset, in_path, cfg.get("seed", 0),
                                     cfg.get("anomaly_digit", 0), cfg.get("fit", "all"))
    train_ds.provenance["fingerprint"] = fp
    save_dataset_cache(out, train_ds, test_ds)
    log.info("prepared %s: train %d rows, test %d rows (prevalence %.4f), %d features",
             dataset, len(train_ds), len(test_ds), test_ds.prevalence,
             int(np.prod(train_ds.features.shape[1:])))
    return {"out": str(out), "fingerprint": fp, "skipped": False,
            "train": len(train_ds), "test": len(test_ds)}


def _train_subset(ds: LabeledDataset, cfg: RunConfig, dataset: str) -> LabeledDataset:
    size = cfg.get("limit")
    if size is None and cfg.get("desk_scale"):
        size = DESK_SCALE[dataset]["train_size"]
    return ds if size is None else ds.subsample(size, cfg.get("seed", 0))


def _train_config(cfg: RunConfig, arch: str) -> TrainConfig:
    epochs = cfg.get("epochs")
    if epochs is None and cfg.get("desk_scale"):
        epochs = DESK_SCALE[_dataset_of(arch)]["epochs"]
    try:
        return TrainConfig.for_arch(arch, epochs=epochs, batch_size=cfg.get("batch"),
                                    lr=cfg.get("lr"), beta1=cfg.get("beta1"),
                                    ema_decay=cfg.get("ema_decay"), seed=cfg.get("seed", 0),
                                    dtype=cfg.get("dtype"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(cfg: RunConfig) -> Checkpoint:
    arch = cfg["arch"]
    train_ds, _ = load_dataset_cache(cfg["data"])
    dataset = train_ds.provenance.get("dataset")
    if dataset != _dataset_of(arch):
        raise ConfigError(f"architecture {arch} cannot train on a {dataset} dataset")
    digit = cfg.get("anomaly_digit")
    if digit is not None and train_ds.provenance.get("anomaly_digit") != digit:
        raise ConfigError(f"cache was prepared for anomaly digit "
                          f"{train_ds.provenance.get('anomaly_digit')}, not {digit}")
    train_ds = _train_subset(train_ds, cfg, dataset)
    tcfg = _train_config(cfg, arch)
    ckpt = train(tcfg, train_ds)
    ckpt.config["run"] = cfg.resolved()
    ckpt.config["run_fingerprint"] = cfg.fingerprint()
    ckpt.config["data"] = train_ds.provenance
    out = Path(cfg["out"])
    save_checkpoint(ckpt, out)
    log_path = Path(cfg.get("log") or f"{out}.log.csv")
    with open(log_path, "w", newline="") as fh:
        fh.write(f"# fingerprint={cfg.fingerprint()}\nepoch,loss_d,loss_g\n")
        for ep, (ld, lg) in enumerate(ckpt.log, start=1):
            fh.write(f"{ep},{ld!r},{lg!r}\n")
    return ckpt


def _score_config(cfg: RunConfig) -> ScoreConfig:
    try:
        return ScoreConfig(alpha=cfg.get("alpha", 0.9), variant=cfg.get("variant", "fm"),
                           anogan_iters=cfg.get("iters", 500), anogan_lr=cfg.get("anogan_lr", 0.01),
                           use_ema=not cfg.get("raw_weights", False), restarts=cfg.get("restarts", 0),
                           seed=cfg.get("seed", 0))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _check_method(arch: str, method: str) -> None:
    wants_bigan = method == "bigan"
    if wants_bigan != arch.endswith("bigan"):
        raise ConfigError(f"method {method!r} cannot score a {arch} checkpoint")


def _test_subset(ds: LabeledDataset, cfg: RunConfig) -> LabeledDataset:
    n = cfg.get("test_limit")
    return ds if n is None else ds.subsample(int(n), cfg.get("seed", 0))


def cmd_score(cfg: RunConfig) -> list:
    ckpt = load_checkpoint(cfg["checkpoint"])
    method = cfg.get("method", "bigan")
    _check_method(ckpt.arch, method)
    _, test_ds = load_dataset_cache(cfg["data"])
    if test_ds.provenance.get("dataset") != _dataset_of(ckpt.arch):
        raise ConfigError(f"{ckpt.arch} checkpoint cannot score a "
                          f"{test_ds.provenance.get('dataset')} dataset")
    test_ds = _test_subset(test_ds, cfg)
    scfg = _score_config(cfg)
    bundle = ckpt.scoring_bundle(scfg.use_ema)
    bs = cfg.get("batch") or HYPER[ckpt.arch].batch_size
    records = score_dataset(bundle, test_ds, scfg, method, bs)
    write_scores(cfg["out"], records, _meta(cfg, score=json.dumps(asdict(scfg), sort_keys=True),
                                            checkpoint=ckpt.config.get("run_fingerprint",
                                                                             ckpt.config.get("fingerprint", "")),
                                            dataset=test_ds.provenance.get("dataset")))
    return records


def _aligned(scores_path, test_ds: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    recs = read_scores(scores_path)
    ids = np.array([r.sample_id for r in recs], dtype=np.int64)
    pos = {int(i): k for k, i in enumerate(test_ds.ids)}
    missing = [int(i) for i in ids if int(i) not in pos]
    if missing:
        raise DataError(f"{len(missing)} score ids are not in the test split (first: {missing[0]})")
    if len(set(ids.tolist())) != len(ids):
        raise DataError("duplicate sample ids in score file")
    labels = test_ds.anomaly[[pos[int(i)] for i in ids]]
    return np.array([r.score for r in recs]), labels


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, protocol: str, q: float = 0.2) -> dict:
    if protocol == "auprc":
        return {"auprc": average_precision(scores, labels), "prevalence": float(labels.mean())}
    return kdd_protocol(scores, labels, q)


def cmd_eval(cfg: RunConfig):
    protocol = cfg.get("protocol")
    _, test_ds = load_dataset_cache(cfg["data"])
    dataset = test_ds.provenance.get("dataset")
    expected = {"mnist": "auprc", "kdd": "kdd20"}[dataset]
    if protocol is None:
        protocol = expected
    if protocol != expected:
        raise ConfigError(f"protocol {protocol!r} does not apply to the {dataset} dataset "
                          f"(use {expected!r})")
    meta = read_score_meta(cfg["scores"])
    scores, labels = _aligned(cfg["scores"], test_ds)
    metrics = evaluate_scores(scores, labels, protocol, cfg.get("q", 0.2))
    label = cfg.get("label") or meta.get("dataset", dataset)
    report = aggregate_runs([metrics], config=label, fingerprint=cfg.fingerprint())
    emit_report(report, cfg["out"], "csv", {"scores_fingerprint": meta.get("fingerprint", "")})
    return report


def _bench_pair(bigan, anogan, data: LabeledDataset, variant: str, cfg: RunConfig,
                dataset: str, n_batches: int, anogan_batches: int, warmup: int, anogan_warmup: int):
    scfg = ScoreConfig(alpha=cfg.get("alpha", 0.9), variant=variant,
                       anogan_iters=cfg.get("iters", 500), anogan_lr=cfg.get("anogan_lr", 0.01))
    bs = cfg.get("batch") or HYPER[bigan.arch].batch_size
    feats = data.features
    need = max(n_batches + warmup, anogan_batches + anogan_warmup)
    chunks = [feats[(k * bs) % max(len(feats) - bs, 1):][:bs] for k in range(need)]
    rng = np.random.default_rng(cfg.get("seed", 0))
    fast = bench_inference(lambda x: bigan_score(bigan, x, scfg), chunks, warmup, n_batches,
                           dataset, variant, "bigan")
    slow = bench_inference(lambda x: anogan_score(anogan, x, scfg, rng=rng), chunks,
                           anogan_warmup, anogan_batches, dataset, variant, "anogan")
    speedup(slow, fast)
    return slow, fast


def run_bench(pairs, cfg: RunConfig):
    """``pairs`` is a list of ``(dataset, bigan_bundle, anogan_bundle, LabeledDataset)``."""
    n = cfg.get("batches", 100)
    n_slow = cfg.get("anogan_batches", n)
    warm = cfg.get("warmup", 3)
    warm_slow = cfg.get("anogan_warmup", warm)
    rows, controls = [], []
    for dataset, bigan, anogan, data in pairs:
        for variant in VARIANTS:
            rows.append(_bench_pair(bigan, anogan, data, variant, cfg, dataset, n, n_slow, warm, warm_slow))
        # control: the fast scorer timed against itself
        scfg = ScoreConfig(variant="fm")
        bs = cfg.get("batch") or HYPER[bigan.arch].batch_size
        chunks = [data.features[:bs]] * (n + warm)
        a = bench_inference(lambda x: bigan_score(bigan, x, scfg), chunks, warm, n, dataset, "control", "bigan")
        b = bench_inference(lambda x: bigan_score(bigan, x, scfg), chunks, warm, n, dataset, "control", "bigan")
        speedup(a, b)
        controls.append((a, b))
    return rows, controls


def cmd_bench(cfg: RunConfig) -> str:
    bigans, anogans, datas = cfg["bigan"], cfg["anogan"], cfg["data"]
    if not (len(bigans) == len(anogans) == len(datas)):
        raise ConfigError("--bigan, --anogan and --data need the same number of entries")
    pairs = []
    for bp, ap, dp in zip(bigans, anogans, datas):
        for p in (bp, ap, dp):
            if not Path(p).exists():
                raise DataError(f"missing file {p}")
        b, a = load_checkpoint(bp), load_checkpoint(ap)
        _check_method(b.arch, "bigan")
        _check_method(a.arch, "anogan")
        _, test_ds = load_dataset_cache(dp)
        pairs.append((_dataset_of(b.arch), b.scoring_bundle(), a.scoring_bundle(), test_ds))
    rows, controls = run_bench(pairs, cfg)
    text = f"# fingerprint={cfg.fingerprint()}\n" + render_bench(rows + controls)
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)
    sys.stdout.write(text)
    if cfg.get("check"):
        slow = [(s.dataset, s.variant, f.speedup) for s, f in rows if f.speedup < 100]
        if slow:
            raise BenchCheckFailed(f"speedup below 100x for {slow}")
    return text


class BenchCheckFailed(EgadError):
    pass


def _run_seed_kdd(cfg: RunConfig, seed: int, in_path, out_dir: Path) -> dict:
    train_ds, test_ds = build_splits("kdd", in_path, seed, fit=cfg.get("fit", "all"))
    sub = RunConfig({**cfg.values, "seed": seed})
    train_ds = _train_subset(train_ds, sub, "kdd")
    test_ds = _test_subset(test_ds, sub)
    ckpt = train(_train_config(sub, "kdd_bigan"), train_ds)
    ckpt.config["run_fingerprint"] = sub.fingerprint()
    save_checkpoint(ckpt, out_dir / f"kdd_bigan_seed{seed}.ckpt")
    bundle = ckpt.scoring_bundle()
    out = {}
    for variant in VARIANTS:
        scfg = ScoreConfig(alpha=sub.get("alpha", 0.9), variant=variant, seed=seed)
        recs = score_dataset(bundle, test_ds, scfg, "bigan", HYPER["kdd_bigan"].batch_size)
        write_scores(out_dir / f"kdd_bigan_{variant}_seed{seed}.csv", recs, _meta(sub))
        out[variant] = kdd_protocol(np.array([r.score for r in recs]), test_ds.anomaly, sub.get("q", 0.2))
    return out


def _run_seed_mnist(cfg: RunConfig, seed: int, digit: int, raw, out_dir: Path) -> dict:
    train_ds, test_ds = make_mnist_split(raw, digit, seed)
    sub = RunConfig({**cfg.values, "seed": seed, "anomaly_digit": digit})
    train_ds = _train_subset(train_ds, sub, "mnist")
    test_ds = _test_subset(test_ds, sub)
    ckpt = train(_train_config(sub, "mnist_bigan"), train_ds)
    ckpt.config["run_fingerprint"] = sub.fingerprint()
    save_checkpoint(ckpt, out_dir / f"mnist_bigan_d{digit}_seed{seed}.ckpt")
    bundle = ckpt.scoring_bundle()
    out = {}
    for variant in cfg.get("variants", VARIANTS):
        scfg = ScoreConfig(alpha=sub.get("alpha", 0.9), variant=variant, seed=seed)
        recs = score_dataset(bundle, test_ds, scfg, "bigan", HYPER["mnist_bigan"].batch_size)
        write_scores(out_dir / f"mnist_bigan_{variant}_d{digit}_seed{seed}.csv", recs, _meta(sub))
        scores = np.array([r.score for r in recs])
        out[variant] = {"auprc": average_precision(scores, test_ds.anomaly),
                        "prevalence": test_ds.prevalence}
    return out


def cmd_reproduce(cfg: RunConfig):
    target = cfg["target"]
    runs = cfg.get("runs", 10 if target == "kdd" else 3)
    out_dir = Path(cfg.get("out_dir", f"reproduce_{target}"))
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = range(1, runs + 1)
    fp = cfg.fingerprint()
    if target == "kdd":
        in_path = cfg.get("in_path") or _default_input("kdd")
        per_seed = [_run_seed_kdd(cfg, s, in_path, out_dir) for s in seeds]
        reports = [aggregate_runs([r[v] for r in per_seed], config=f"kdd_bigan_{v}", fingerprint=fp)
                   for v in VARIANTS]
        emit_report(reports, out_dir / "table1.csv", "csv")
        return reports
    if target == "mnist":
        raw = load_mnist(cfg.get("in_path") or _default_input("mnist"))
        digits = cfg.get("digits", list(range(10)))
        if isinstance(digits, (int, str)):
            digits = [int(d) for d in str(digits).split(",")]
        reports = []
        variants = cfg.get("variants", VARIANTS)
        results = {d: [_run_seed_mnist(cfg, s, d, raw, out_dir) for s in seeds] for d in digits}
        for variant in variants:
            for d in digits:
                reports.append(aggregate_runs([r[variant] for r in results[d]],
                                              config=f"mnist_bigan_{variant}_d{d}", fingerprint=fp,
                                              digit=d, variant=variant, metric="auprc"))
        emit_report(reports, out_dir / "figure1.csv", "csv")
        emit_report(reports, out_dir / "figure1.plot", "plot-data")
        return reports
    if target == "bench":
        return _reproduce_bench(cfg, out_dir)
    raise ConfigError(f"unknown reproduce target {target!r}")


def _reproduce_bench(cfg: RunConfig, out_dir: Path) -> str:
    # timing does not depend on weight values, so freshly initialised models serve
    rng = np.random.default_rng(cfg.get("seed", 0))
    pairs = []
    for dataset, shape in (("mnist", (28, 28, 1)), ("kdd", (KDD_FEATURES,))):
        if dataset not in cfg.get("datasets", ("mnist", "kdd")):
            continue
        n = 4 * HYPER[f"{dataset}_bigan"].batch_size
        feats = rng.uniform(-1 if dataset == "mnist" else 0, 1, (n, *shape)).astype(np.float32)
        data = LabeledDataset(feats, np.zeros(n, bool), np.arange(n), split="test")
        seed_init = InitSpec(HYPER[f"{dataset}_bigan"].init, seed=cfg.get("seed", 0))
        pairs.append((dataset, build_model(f"{dataset}_bigan", seed_init, np.float32),
                      build_model(f"{dataset}_gan", seed_init, np.float32), data))
    rows, controls = run_bench(pairs, cfg)
    text = f"# fingerprint={cfg.fingerprint()}\n" + render_bench(rows + controls)
    (out_dir / "table2.csv").write_text(text)
    if cfg.get("check"):
        slow = [(s.dataset, s.variant, f.speedup) for s, f in rows if f.speedup < 100]
        if slow:
            raise BenchCheckFailed(f"speedup below 100x for {slow}")
    return text


# ----------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override its values")
    p.add_argument("--seed", type=int, help="master seed for split, init and sampling (default: 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="training epochs (default: 100 mnist, 50 kdd)")
    p.add_argument("--batch", type=int, help="batch size (default: 100 mnist, 50 kdd)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-05)")
    p.add_argument("--beta1", type=float, help="Adam beta1 (default: 0.5)")
    p.add_argument("--ema-decay", type=float, help="EMA decay (default: 0.999 mnist, 0.9999 kdd)")
    p.add_argument("--dtype", choices=("float32", "float64"), help="compute precision (default: float32)")
    p.add_argument("--limit", type=float,
                   help="train on a seeded subset: a row count, or a fraction below 1 (default: all)")
    p.add_argument("--desk-scale", action="store_true",
                   help="CPU preset: kdd 10%% of train for 10 epochs, mnist 8000 rows for 10 epochs")


def _score_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=VARIANTS, help="discriminator loss variant (default: fm)")
    p.add_argument("--alpha", type=float, help="weight of the reconstruction term (default: 0.9)")
    p.add_argument("--iters", type=int, help="latent recovery SGD steps for anogan (default: 500)")
    p.add_argument("--anogan-lr", type=float, help="latent recovery step size (default: 0.01)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="encode raw data into a split cache")
    _common(p)
    p.add_argument("--dataset", choices=("mnist", "kdd"), help="dataset to prepare")
    p.add_argument("--in", dest="in_path",
                   help=f"raw input (default: ${DATA_ENV}/mnist or ${DATA_ENV}/kddcup.data_10_percent)")
    p.add_argument("--out", help="cache file to write")
    p.add_argument("--anomaly-digit", type=int, help="mnist digit treated as anomalous (default: 0)")
    p.add_argument("--fit", choices=("all", "train"),
                   help="rows used for kdd min-max statistics (default: all)")

    p = sub.add_parser("train", help="train a model on a prepared cache")
    _common(p)
    p.add_argument("--arch", choices=ARCH_IDS, help="architecture id")
    p.add_argument("--data", help="prepared cache")
    p.add_argument("--out", help="checkpoint file to write")
    p.add_argument("--log", help="per-epoch loss CSV (default: <out>.log.csv)")
    p.add_argument("--anomaly-digit", type=int, help="assert the cache's mnist anomaly digit")
    _train_flags(p)

    p = sub.add_parser("score", help="score the test split of a cache")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--data", help="prepared cache")
    p.add_argument("--out", help="score file to write")
    p.add_argument("--method", choices=("bigan", "anogan"), help="scoring method (default: bigan)")
    p.add_argument("--batch", type=int, help="scoring batch size (default: 100 mnist, 50 kdd)")
    p.add_argument("--test-limit", type=int, help="score a seeded subset of this many test rows")
    p.add_argument("--raw-weights", action="store_true", help="score with raw instead of EMA weights")
    p.add_argument("--restarts", type=int, help="extra latent initialisations for anogan (default: 0)")
    _score_flags(p)

    p = sub.add_parser("eval", help="turn a score file into metrics")
    _common(p)
    p.add_argument("--scores", help="score file")
    p.add_argument("--data", help="prepared cache holding the labels")
    p.add_argument("--protocol", choices=("auprc", "kdd20"), help="auprc for mnist, kdd20 for kdd")
    p.add_argument("--q", type=float, help="flagged fraction for kdd20 (default: 0.2)")
    p.add_argument("--label", help="config label written into the report")
    p.add_argument("--out", help="report CSV to write")

    p = sub.add_parser("bench", help="time bigan against anogan scoring")
    _common(p)
    p.add_argument("--bigan", nargs="+", help="BiGAN checkpoint(s)")
    p.add_argument("--anogan", nargs="+", help="GAN checkpoint(s), aligned with --bigan")
    p.add_argument("--data", nargs="+", help="prepared cache(s), aligned with --bigan")
    p.add_argument("--batches", type=int, help="timed batches (default: 100)")
    p.add_argument("--warmup", type=int, help="untimed warmup batches (default: 3)")
    p.add_argument("--anogan-batches", type=int, help="timed anogan batches (default: --batches)")
    p.add_argument("--anogan-warmup", type=int, help="anogan warmup batches (default: --warmup)")
    p.add_argument("--batch", type=int, help="batch size (default: 100 mnist, 50 kdd)")
    p.add_argument("--check", action="store_true", help="exit non-zero if any speedup is below 100x")
    p.add_argument("--out", help="CSV file for the timing table")
    _score_flags(p)

    p = sub.add_parser("reproduce", help="run the whole pipeline over several seeds")
    _common(p)
    p.add_argument("--target", choices=("kdd", "mnist", "bench"), help="experiment to rerun")
    p.add_argument("--runs", type=int, help="seeds 1..runs (default: 10 kdd, 3 mnist)")
    p.add_argument("--in", dest="in_path", help=f"raw data (default: from ${DATA_ENV})")
    p.add_argument("--out-dir", help="directory for checkpoints, scores and reports")
    p.add_argument("--digits", help="comma-separated mnist anomaly digits (default: 0-9)")
    p.add_argument("--test-limit", type=int, help="evaluate on a seeded subset of this many test rows")
    p.add_argument("--q", type=float, help="flagged fraction for kdd (default: 0.2)")
    p.add_argument("--batches", type=int, help="bench: timed batches (default: 100)")
    p.add_argument("--warmup", type=int, help="bench: warmup batches (default: 3)")
    p.add_argument("--anogan-batches", type=int, help="bench: timed anogan batches")
    p.add_argument("--anogan-warmup", type=int, help="bench: anogan warmup batches")
    p.add_argument("--batch", type=int, help="batch size (default: 100 mnist, 50 kdd)")
    p.add_argument("--check", action="store_true", help="bench: fail if any speedup is below 100x")
    p.add_argument("--fit", choices=("all", "train"), help="kdd min-max statistics source")
    p.add_argument("--epochs", type=int, help="training epochs (default: 100 mnist, 50 kdd)")
    p.add_argument("--dtype", choices=("float32", "float64"), help="compute precision (default: float32)")
    p.add_argument("--limit", type=float, help="train-set subset size (rows or fraction)")
    p.add_argument("--desk-scale", action="store_true", help="CPU preset, see train --help")
    p.add_argument("--alpha", type=float, help="weight of the reconstruction term (default: 0.9)")
    return parser


REQUIRED = {
    "prepare": ("dataset", "out"),
    "train": ("arch", "data", "out"),
    "score": ("checkpoint", "data", "out"),
    "eval": ("scores", "data", "out"),
    "bench": ("bigan", "anogan", "data"),
    "reproduce": ("target",),
}

COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "reproduce": cmd_reproduce,
}


def _subparser_keys(parser: argparse.ArgumentParser, command: str) -> set[str]:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return {a.dest for a in action.choices[command]._actions if a.dest != "help"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for k, v in list(vars(args).items()):
        if v is False:  # store_true flags left unset should not mask the config file
            setattr(args, k, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args, _subparser_keys(parser, args.command))
        missing = [k for k in REQUIRED[args.command] if cfg.get(k) is None]
        if missing:
            raise ConfigError(f"{args.command}: missing required setting(s) "
                              + ", ".join("--" + k.replace("_", "-") for k in missing))
        if cfg.get("limit") is not None and cfg["limit"] >= 1:
            cfg.values["limit"] = int(cfg["limit"])
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BenchCheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
