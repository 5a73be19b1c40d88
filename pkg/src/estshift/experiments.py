"""Experiment configs, the training loop, and the named experiment runners.

Every runner writes into ``<out_dir>/<kind>/``: one directory per run with
its CSVs and a checkpoint, summary CSVs for the whole sweep, and a
``manifest.json`` listing each run's status and files.  Nothing written
depends on wall-clock time, so identical configs give identical bytes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .analysis import EsmRecord, Snapshot, esm_records, input_shift_record
from .data import Dataset, load_mnist, subsample
from .errors import ConfigError, DataError, DivergenceError, EstShiftError, NonFiniteError
from .io import emit_csv, save_checkpoint
from .layers import classification_error, softmax_cross_entropy
from .networks import (SGD, Network, NetworkSpec, backward_and_update, build, gnbn_pattern,
                       residual_variants)
from .normalization import perturb_stats
from .tensor import RngState, rng_permutation

OVERRIDABLE = {"optimizer", "epochs", "network", "eval_every"}
# Weight scales for the BN MLPs relative to He init; see README.
MLP_INIT_GAIN = 0.6
MLP_HEAD_GAIN = 2.0
# Unnormalized 20-layer MLPs oscillate under full-batch GD at lr 0.1, so the
# no-normalization baseline keeps He init and a smaller step with momentum.
PLAIN_OVERRIDES = {"none": {"optimizer": {"lr": 0.003, "momentum": 0.9}, "epochs": 1000,
                            "network": {"init_gain": 1.0, "head_gain": 1.0}}}
KINDS = ("setup_one", "setup_two", "gnbn", "perturb", "xbn_toy")
DATA_ENV = "ESTSHIFT_MNIST_DIR"
# Per-pixel mean and std of the MNIST training images.
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081


def default_data_dir() -> str:
    return os.environ.get(DATA_ENV, "data/mnist")


@dataclass
class OptimizerConfig:
    kind: str = "full_batch_gd"  # full_batch_gd | sgd
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: Optional[int] = None
    schedule: str = "constant"  # constant | cosine (per epoch)

    def __post_init__(self):
        if self.kind not in ("full_batch_gd", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("optimizer hyperparameters must be non-negative")
        if self.kind == "sgd" and (self.batch_size is None or self.batch_size < 2):
            raise ConfigError("sgd needs batch_size >= 2")

    def make(self) -> SGD:
        return SGD(self.lr, self.momentum, self.weight_decay)

    def lr_at(self, epoch: int, epochs: int) -> float:
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * (epoch - 1) / epochs))
        return self.lr


@dataclass
class ExperimentConfig:
    """Everything a run depends on.  Loaded from JSON; unknown keys are rejected.

    ``network`` holds :class:`NetworkSpec` overrides.  ``patterns`` names the
    MLP normalizer layouts to compare (``bn``, ``none``, ``gnbn``, ``ln`` or
    any single token such as ``gn:4``).  ``models`` names toy residual nets
    as ``baseline`` or ``<variant>@<pattern>``, e.g. ``p2:gn:4@ALL``.
    """

    kind: str
    network: dict = field(default_factory=dict)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 80
    alpha: float = 0.9
    eps: float = 1e-5
    seeds: list = field(default_factory=lambda: [0])
    sizes: list = field(default_factory=lambda: [32, 128, 256, 512, 1024])
    deltas: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    perturb_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    patterns: list = field(default_factory=list)
    # Per-pattern replacements for optimizer, epochs, network or eval_every.
    pattern_overrides: dict = field(default_factory=dict)
    gn_groups: int = 4
    models: list = field(default_factory=list)
    disturbed_blocks: Optional[list] = None
    train_size: int = 4096
    test_size: Optional[int] = None
    input_norm: str = "none"  # none | mnist
    eval_every: int = 1
    esm_every: Optional[int] = None
    snapshot_every: int = 0
    train_eval_mode: str = "train"
    test_eval_mode: str = "infer"
    eval_batch_size: Optional[int] = None
    save_checkpoints: bool = True
    out_dir: str = "results"
    data_dir: str = field(default_factory=default_data_dir)

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for name in ("seeds", "perturb_seeds"):
            if any(int(s) < 0 for s in getattr(self, name)):
                raise ConfigError(f"{name} must be non-negative integers")
        if any(int(n) < 2 for n in self.sizes):
            raise ConfigError("subsample sizes must be >= 2")
        if any(d < 0 for d in self.deltas):
            raise ConfigError("noise magnitudes must be non-negative")
        if self.gn_groups < 1 or self.train_size < 2 or self.eval_every < 1:
            raise ConfigError("gn_groups, train_size and eval_every must be positive")
        if self.test_size is not None and self.test_size < 1:
            raise ConfigError("test_size must be positive")
        if self.esm_every is not None and self.esm_every < 0:
            raise ConfigError("esm_every must be non-negative")
        if self.input_norm not in ("none", "mnist"):
            raise ConfigError(f"unknown input_norm {self.input_norm!r}")
        for m in (self.train_eval_mode, self.test_eval_mode):
            if m not in ("train", "infer"):
                raise ConfigError(f"evaluation mode must be train or infer, got {m!r}")
        for name in ("network", "patterns", "models"):
            if not isinstance(getattr(self, name), (dict if name == "network" else list)):
                raise ConfigError(f"{name} has the wrong type")
        if "arch" in self.network or "seed" in self.network:
            raise ConfigError("network.arch and network.seed are set by the runner")
        if not isinstance(self.pattern_overrides, dict):
            raise ConfigError("pattern_overrides must map pattern names to objects")
        for pattern, ov in self.pattern_overrides.items():
            if not isinstance(ov, dict) or set(ov) - OVERRIDABLE:
                raise ConfigError(f"pattern_overrides[{pattern!r}] may only set {sorted(OVERRIDABLE)}")
            self.for_pattern(pattern)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("config needs a 'kind'")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def for_pattern(self, pattern: str) -> "ExperimentConfig":
        """This config with ``pattern``'s overrides applied (no overrides: self)."""
        ov = self.pattern_overrides.get(pattern)
        if not ov:
            return self
        d = self.to_dict()
        d.pop("pattern_overrides")
        for k, v in ov.items():
            d[k] = {**d[k], **v} if k in ("optimizer", "network") else v
        return ExperimentConfig.from_dict(d)

    def mlp_spec(self, pattern: str, seed: int, input_dim: int) -> NetworkSpec:
        depth = int(self.network.get("depth", 20))
        tokens = pattern_tokens(pattern, depth - 1, self.gn_groups)
        d = {"depth": depth, "width": 128, "init_gain": MLP_INIT_GAIN, "head_gain": MLP_HEAD_GAIN,
             **self.network}
        d.update(arch="mlp", norm_pattern=tokens, seed=int(seed), input_shape=(input_dim,),
                 alpha=self.alpha, eps=self.eps)
        return _spec(d)

    def residual_spec(self, model: str, seed: int) -> NetworkSpec:
        d = {"width": 16, "block_count": 4, "affine": True, **self.network}
        d.update(arch="residual", variants=model_variants(model, int(d["block_count"])),
                 seed=int(seed), input_shape=(1, 28, 28), alpha=self.alpha, eps=self.eps)
        return _spec(d)


def _spec(d: dict) -> NetworkSpec:
    try:
        return NetworkSpec.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def pattern_tokens(pattern: str, hidden: int, gn_groups: int = 4) -> list[str]:
    """Per-hidden-layer normalizer tokens for a named MLP layout."""
    p = pattern.strip().lower()
    if p == "gnbn":
        return gnbn_pattern(hidden, gn_groups)
    if p == "gn":
        p = f"gn:{gn_groups}"
    return [p] * hidden


def model_variants(model: str, block_count: int) -> list[str]:
    if model == "baseline":
        return ["baseline"] * block_count
    if "@" not in model:
        raise ConfigError(f"model {model!r} must be 'baseline' or '<variant>@<pattern>'")
    variant, pattern = model.split("@", 1)
    return residual_variants(block_count, variant, pattern.upper())


def config_for(kind: str, **overrides) -> ExperimentConfig:
    """Defaults for each named experiment, optionally overridden."""
    base: dict = {"kind": kind}
    if kind == "setup_one":
        base.update(patterns=["bn"], esm_every=1)
    elif kind == "setup_two":
        base.update(patterns=["bn", "none"], seeds=[0, 1, 2, 3, 4], eval_every=80, esm_every=0,
                    pattern_overrides=PLAIN_OVERRIDES)
    elif kind == "gnbn":
        base.update(patterns=["bn", "gnbn"], seeds=[0, 1, 2, 3, 4], sizes=[32, 128], esm_every=1,
                    pattern_overrides=PLAIN_OVERRIDES)
    elif kind in ("perturb", "xbn_toy"):
        base.update(
            optimizer={"kind": "sgd", "lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4,
                       "batch_size": 128, "schedule": "cosine"},
            epochs=10, eval_every=10, esm_every=0, train_eval_mode="infer",
            eval_batch_size=1000, input_norm="mnist",
            test_size=2000 if kind == "perturb" else None,
            models=(["baseline", "p2:gn:4@ALL", "p2:in@ALL"] if kind == "perturb" else
                    ["baseline", "p1:gn:4@ALL", "p2:gn:4@ALL", "p3:gn:4@ALL",
                     "p2:gn:4@D2", "p2:gn:4@D4", "p2:in@ALL"]))
    else:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    base.update(overrides)
    return ExperimentConfig.from_dict(base)


# -- training -------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_err: float
    test_err: float

    FIELDS = ("epoch", "train_err", "test_err")

    def row(self) -> tuple:
        return (self.epoch, self.train_err, self.test_err)


@dataclass
class TrainResult:
    net: Network
    log: list = field(default_factory=list)
    esm: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    rng: Optional[RngState] = None


def _chunks(n: int, size: Optional[int]):
    if not size or size >= n:
        return [slice(0, n)]
    return [slice(i, i + size) for i in range(0, n, size)]


def evaluate(net: Network, x, y, mode: str, batch_size: Optional[int] = None) -> float:
    """0-1 error.  Train mode normalizes each chunk with its own batch statistics."""
    wrong = 0.0
    for s in _chunks(x.shape[0], batch_size):
        logits = net.forward(x[s], mode)
        wrong += classification_error(logits, y[s]) * logits.shape[0]
    net.release()
    return wrong / x.shape[0]


def _due(epoch: int, every: Optional[int], last: int) -> bool:
    if every is None or every == 0:
        return epoch == last
    return epoch % every == 0 or epoch == last


def train(config: ExperimentConfig, net: Network, train_set: tuple, test_set: tuple,
          rng: Optional[RngState] = None) -> TrainResult:
    """Optimize ``net`` on ``train_set`` and log errors (and ESM) per epoch.

    ``train_set`` and ``test_set`` are ``(x, y)`` pairs.  Errors are
    measured after each epoch's update: train error with
    ``config.train_eval_mode``, test error with ``config.test_eval_mode``.
    When ESM is due and the test mode is infer, the same inference pass
    yields both the test error and the expected statistics.
    """
    opt_cfg = config.optimizer
    opt = opt_cfg.make()
    x, y = train_set
    tx, ty = test_set
    rng = rng or RngState(0)
    res = TrainResult(net, rng=rng)
    batch = x.shape[0] if opt_cfg.kind == "full_batch_gd" else opt_cfg.batch_size
    eval_bs = config.eval_batch_size if opt_cfg.kind == "sgd" else None
    has_bn = bool(net.bn_layers)
    for epoch in range(1, config.epochs + 1):
        opt.lr = opt_cfg.lr_at(epoch, config.epochs)
        order = (np.arange(x.shape[0]) if opt_cfg.kind == "full_batch_gd"
                 else rng_permutation(rng, x.shape[0]))
        total = 0.0
        for s in _chunks(x.shape[0], batch):
            idx = order[s]
            if idx.size < 2 and has_bn:
                continue
            try:
                logits = net.forward(x[idx], "train")
                loss, dlogits = softmax_cross_entropy(logits, y[idx])
                if not np.isfinite(loss):
                    raise NonFiniteError("loss")
                backward_and_update(net, dlogits, opt)
            except NonFiniteError as e:
                raise DivergenceError(f"training diverged at epoch {epoch}: {e}") from None
            total += loss * idx.size
        res.losses.append(total / x.shape[0])
        if config.snapshot_every and epoch % config.snapshot_every == 0:
            res.snapshots.append(Snapshot.take(net, epoch))
        if not _due(epoch, config.eval_every, config.epochs):
            continue
        try:
            train_bs = batch if config.train_eval_mode == "train" else eval_bs
            train_err = evaluate(net, x, y, config.train_eval_mode, train_bs)
            if has_bn and _due(epoch, config.esm_every, config.epochs):
                records, logits = esm_records(net, tx, epoch, eval_bs)
                res.esm.extend(records)
                if config.test_eval_mode == "infer":
                    test_err = classification_error(logits, ty)
                else:
                    test_err = evaluate(net, tx, ty, "train", eval_bs)
            else:
                test_err = evaluate(net, tx, ty, config.test_eval_mode, eval_bs)
        except NonFiniteError as e:
            raise DivergenceError(f"evaluation diverged at epoch {epoch}: {e}") from None
        res.log.append(EpochRecord(epoch, train_err, test_err))
    return res


# -- runners --------------------------------------------------------------

@dataclass
class RunOutcome:
    name: str
    status: str = "ok"
    error: str = ""
    family: str = ""  # config | data | divergence | numeric, for failed runs
    files: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    out_dir: str
    runs: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [r for r in self.runs if r.status != "ok"]


def _prep(ds: Dataset, config: ExperimentConfig):
    x = ds.flat()
    if config.input_norm == "mnist":
        x = (x - MNIST_MEAN) / MNIST_STD
    return x, ds.labels


def _load(config: ExperimentConfig, split: str) -> Dataset:
    return load_mnist(config.data_dir, split)


def _test_set(config: ExperimentConfig) -> Dataset:
    ds = _load(config, "test")
    if config.test_size is not None and config.test_size < len(ds):
        ds = subsample(ds, config.test_size, 0)
    return ds


def _write_run(run_dir: str, result: TrainResult, config: ExperimentConfig,
               extra_esm: Optional[list] = None) -> list:
    os.makedirs(run_dir, exist_ok=True)
    files = []
    emit_csv(result.log, os.path.join(run_dir, "errors.csv"), EpochRecord.FIELDS)
    files.append("errors.csv")
    records = list(extra_esm or []) + list(result.esm)
    if result.net.bn_layers:
        emit_csv(records, os.path.join(run_dir, "esm.csv"), EsmRecord.FIELDS)
        files.append("esm.csv")
        slots = sorted({r.layer_index for r in records})
        wide = {}
        for r in records:
            wide.setdefault(r.epoch, {})[r.layer_index] = r.esm_sigma
        rows = [{"epoch": e, **{f"layer_{k}": wide[e].get(k, float("nan")) for k in slots}}
                for e in sorted(wide)]
        emit_csv(rows, os.path.join(run_dir, "esm_sigma.csv"),
                 ["epoch"] + [f"layer_{k}" for k in slots])
        files.append("esm_sigma.csv")
    if config.save_checkpoints:
        save_checkpoint(result.net, os.path.join(run_dir, "checkpoint.bin"), config.epochs,
                        result.rng)
        files.append("checkpoint.bin")
    return files


def _guarded(outcome: RunOutcome, fn):
    try:
        fn(outcome)
    except EstShiftError as e:
        outcome.status = "failed"
        outcome.error = f"{type(e).__name__}: {e}"
        outcome.family = error_family(e)
    return outcome


def error_family(e: Exception) -> str:
    if isinstance(e, ConfigError):
        return "config"
    if isinstance(e, DataError):
        return "data"
    if isinstance(e, DivergenceError):
        return "divergence"
    return "numeric"


def _final(result: TrainResult) -> dict:
    last = result.log[-1]
    out = {"train_err": last.train_err, "test_err": last.test_err,
           "final_loss": result.losses[-1]}
    finals = [r for r in result.esm if r.epoch == last.epoch]
    if finals:
        out["esm_sigma_mean"] = float(np.mean([r.esm_sigma for r in finals]))
    return out


def _mlp_run(config, pattern, seed, train_ds, test_ds, run_dir, outcome, layer0=False):
    config = config.for_pattern(pattern)
    x, y = _prep(train_ds, config)
    tx, ty = _prep(test_ds, config)
    net = build(config.mlp_spec(pattern, seed, x.shape[1]))
    res = train(config, net, (x, y), (tx, ty), RngState(seed).split(1))
    extra = [input_shift_record(train_ds.flat(), test_ds.flat(), config.epochs)] if layer0 else []
    outcome.files = [os.path.join(outcome.name, f) for f in _write_run(run_dir, res, config, extra)]
    outcome.metrics = _final(res)
    if layer0:
        outcome.metrics["input_shift"] = extra[0].esm_sigma
    return res


def _setup_one(config: ExperimentConfig, root: str, prefix: str = "") -> ExperimentResult:
    result = ExperimentResult(root)
    test = _test_set(config)
    for pattern in config.patterns:
        for seed in config.seeds:
            name = os.path.join(prefix, pattern, f"seed{seed}")
            outcome = RunOutcome(name)
            _guarded(outcome, lambda o: _mlp_run(config, pattern, seed, test, test,
                                                 os.path.join(root, name), o))
            outcome.metrics.update(pattern=pattern, seed=seed)
            result.runs.append(outcome)
    return result


def _setup_two(config: ExperimentConfig, root: str, prefix: str = "") -> ExperimentResult:
    result = ExperimentResult(root)
    test = _test_set(config)
    rows = []
    for pattern in config.patterns:
        for size in config.sizes:
            for seed in config.seeds:
                name = os.path.join(prefix, pattern, f"n{size}", f"seed{seed}")
                outcome = RunOutcome(name)

                def go(o, size=size, seed=seed, pattern=pattern, name=name):
                    train_ds = subsample(test, int(size), int(seed))
                    _mlp_run(config, pattern, seed, train_ds, test, os.path.join(root, name), o,
                             layer0=True)
                _guarded(outcome, go)
                outcome.metrics.update(pattern=pattern, size=size, seed=seed)
                result.runs.append(outcome)
                if outcome.status == "ok":
                    m = outcome.metrics
                    rows.append({"pattern": pattern, "size": size, "seed": seed,
                                 "train_err": m["train_err"], "test_err": m["test_err"],
                                 "input_shift": m["input_shift"],
                                 "esm_sigma_mean": m.get("esm_sigma_mean", float("nan"))})
    fields_ = ["pattern", "size", "seed", "train_err", "test_err", "input_shift",
               "esm_sigma_mean"]
    path = os.path.join(root, prefix, "summary.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    emit_csv(rows, path, fields_)
    result.tables["summary"] = os.path.join(prefix, "summary.csv")
    return result


def _gnbn(config: ExperimentConfig, root: str) -> ExperimentResult:
    """Setup one with per-epoch ESM, then setup two measured at the last epoch only."""
    one = _setup_one(config, root, "setup_one")
    two = _setup_two(replace(config, esm_every=0, eval_every=config.epochs), root, "setup_two")
    out = ExperimentResult(root, one.runs + two.runs)
    out.tables.update({"setup_two_summary": two.tables["summary"]})
    return out


def disturbed_first_bns(net: Network, blocks: Optional[list] = None) -> list:
    """First normalizer of each disturbed block (1-based; default: first half)."""
    n = len(net.blocks)
    chosen = list(range(1, n // 2 + 1)) if blocks is None else [int(b) for b in blocks]
    if any(not 1 <= b <= n for b in chosen):
        raise ConfigError(f"disturbed blocks {chosen} out of range 1..{n}")
    out = []
    for b in chosen:
        first = net.blocks[b - 1].norms[0]
        if not first.is_bn:
            raise ConfigError(f"block {b} has no BN in its first slot")
        out.append(first)
    return out


def perturbation_sweep(net: Network, x, y, deltas, seeds, blocks=None,
                       batch_size: Optional[int] = None) -> list[dict]:
    """Accuracy with the disturbed blocks' first BN evaluated on noisy statistics."""
    targets = disturbed_first_bns(net, blocks)
    originals = [t.bn for t in targets]
    rows = []
    try:
        for delta in deltas:
            zero = None
            for ps in seeds:
                if zero is not None:
                    # Zero noise leaves the statistics alone whatever the seed.
                    rows.append({**zero, "perturb_seed": int(ps)})
                    continue
                rng = RngState(int(ps))
                clamped = False
                for t, state in zip(targets, originals):
                    t.bn, c = perturb_stats(state, float(delta), rng)
                    clamped |= c
                acc = 1.0 - evaluate(net, x, y, "infer", batch_size)
                rows.append({"delta": float(delta), "perturb_seed": int(ps), "accuracy": acc,
                             "clamped": clamped})
                if delta == 0:
                    zero = rows[-1]
    finally:
        for t, state in zip(targets, originals):
            t.bn = state
    return rows


def _residual_run(config, model, seed, train_xy, test_xy, run_dir, outcome):
    net = build(config.residual_spec(model, seed))
    res = train(config, net, train_xy, test_xy, RngState(seed).split(1))
    outcome.files = [os.path.join(outcome.name, f) for f in _write_run(run_dir, res, config)]
    outcome.metrics = _final(res)
    outcome.metrics["clean_acc"] = 1.0 - res.log[-1].test_err
    return res


def _toy_sets(config: ExperimentConfig, seed: int):
    train_ds = subsample(_load(config, "train"), config.train_size, seed)
    x, y = _prep(train_ds, config)
    tx, ty = _prep(_test_set(config), config)
    return (x.reshape(-1, 1, 28, 28), y), (tx.reshape(-1, 1, 28, 28), ty)


def _model_dir(model: str) -> str:
    return model.replace(":", "-").replace("@", "_")


def _perturb(config: ExperimentConfig, root: str) -> ExperimentResult:
    result = ExperimentResult(root)
    rows = []
    for seed in config.seeds:
        train_xy, test_xy = _toy_sets(config, seed)
        for model in config.models:
            name = os.path.join(_model_dir(model), f"seed{seed}")
            outcome = RunOutcome(name)

            def go(o, model=model, seed=seed, name=name):
                res = _residual_run(config, model, seed, train_xy, test_xy,
                                    os.path.join(root, name), o)
                clean = o.metrics["clean_acc"]
                sweep = perturbation_sweep(res.net, *test_xy, config.deltas, config.perturb_seeds,
                                           config.disturbed_blocks, config.eval_batch_size)
                for r in sweep:
                    rows.append({"model": model, "seed": seed, **r,
                                 "degradation": clean - r["accuracy"]})
            _guarded(outcome, go)
            outcome.metrics.update(model=model, seed=seed)
            result.runs.append(outcome)
    emit_csv(rows, os.path.join(root, "perturb.csv"),
             ["model", "seed", "delta", "perturb_seed", "accuracy", "clamped", "degradation"])
    summary = []
    for model in config.models:
        for delta in config.deltas:
            sel = [r for r in rows if r["model"] == model and r["delta"] == float(delta)]
            if sel:
                summary.append({"model": model, "delta": float(delta),
                                "accuracy": float(np.mean([r["accuracy"] for r in sel])),
                                "degradation": float(np.mean([r["degradation"] for r in sel]))})
    emit_csv(summary, os.path.join(root, "perturb_summary.csv"),
             ["model", "delta", "accuracy", "degradation"])
    result.tables.update(perturb="perturb.csv", summary="perturb_summary.csv")
    return result


def _xbn_toy(config: ExperimentConfig, root: str) -> ExperimentResult:
    result = ExperimentResult(root)
    rows = []
    for seed in config.seeds:
        train_xy, test_xy = _toy_sets(config, seed)
        for model in config.models:
            name = os.path.join(_model_dir(model), f"seed{seed}")
            outcome = RunOutcome(name)
            _guarded(outcome, lambda o: _residual_run(config, model, seed, train_xy, test_xy,
                                                      os.path.join(root, name), o))
            outcome.metrics.update(model=model, seed=seed)
            result.runs.append(outcome)
            if outcome.status == "ok":
                rows.append({"model": model, "seed": seed,
                             "test_acc": outcome.metrics["clean_acc"]})
    emit_csv(rows, os.path.join(root, "accuracy.csv"), ["model", "seed", "test_acc"])
    result.tables["accuracy"] = "accuracy.csv"
    return result


def validate(config: ExperimentConfig):
    """Build every network the config names, so bad layouts fail before data is read."""
    if config.kind in ("setup_one", "setup_two", "gnbn"):
        if not config.patterns:
            raise ConfigError("patterns must be non-empty")
        for p in config.patterns:
            build(config.for_pattern(p).mlp_spec(p, 0, 784))
    else:
        if not config.models:
            raise ConfigError("models must be non-empty")
        for m in config.models:
            net = build(config.residual_spec(m, 0))
            if config.kind == "perturb":
                disturbed_first_bns(net, config.disturbed_blocks)


_RUNNERS = {"setup_one": _setup_one, "setup_two": _setup_two, "gnbn": _gnbn,
            "perturb": _perturb, "xbn_toy": _xbn_toy}


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every sub-run of ``config`` and write ``manifest.json``.

    A failing run (divergence, bad data) is recorded in the manifest and does
    not stop the others; callers inspect ``result.failed``.
    """
    validate(config)
    root = os.path.join(config.out_dir, config.kind)
    os.makedirs(root, exist_ok=True)
    result = _RUNNERS[config.kind](config, root)
    manifest = {
        "kind": config.kind,
        "config": config.to_dict(),
        "runs": [asdict(r) for r in result.runs],
        "tables": result.tables,
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return result


def _json_default(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")
