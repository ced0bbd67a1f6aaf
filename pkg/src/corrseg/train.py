"""Optimization loop: Adam, plateau learning-rate decay, early stopping,
evaluation over modality subsets and the missing-modality sweep."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .autograd import Tensor, no_grad
from .blocks import CorrSegNet, NetworkConfig
from .data import (MODALITIES, ModalitySubset, SUBSET_SWEEP_ORDER,
                   VolumeCase, apply_modality_mask)
from .errors import (ConfigurationError, PreconditionError,
                     TrainingDivergedError)
from .losses import dice_loss, reconstruction_loss, total_loss
from .metrics import (MetricsReport, RegionMetrics, REGIONS, SubsetRow,
                      dice_score, hausdorff, region_extract, sensitivity)


@dataclass
class TrainConfig:
    """Network structure plus optimization protocol."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    lr: float = 5e-4
    max_epochs: int = 150
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    early_stop_patience: int = 50
    improvement_threshold: float = 1e-4
    modality_dropout: bool = False
    dropout_prob: float = 0.25
    train_seed: int = 0   # loop seed: shuffling, dropout, split

    _TRAINER_KEYS = ("lr", "max_epochs", "plateau_patience", "plateau_factor",
                     "early_stop_patience", "improvement_threshold",
                     "modality_dropout", "dropout_prob", "train_seed")

    def to_text(self) -> str:
        lines = []
        for f in fields(NetworkConfig):
            v = getattr(self.network, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        for key in self._TRAINER_KEYS:
            v = getattr(self, key)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        net_fields = {f.name: f for f in fields(NetworkConfig)}
        own_fields = {f.name: f for f in fields(cls)}
        net_kwargs: dict = {}
        own_kwargs: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep:
                raise ConfigurationError(
                    f"config line {lineno}: expected key=value, got {line!r}")
            if key in net_fields:
                net_kwargs[key] = _coerce(key, value, net_fields[key])
            elif key in own_fields and key != "network":
                own_kwargs[key] = _coerce(key, value, own_fields[key])
            else:
                raise ConfigurationError(
                    f"config line {lineno}: unknown key {key!r}")
        return cls(network=NetworkConfig(**net_kwargs), **own_kwargs)


def _coerce(key: str, value: str, f):
    if key == "dilation_rates":
        return tuple(int(x) for x in value.split(","))
    default = f.default
    try:
        if isinstance(default, bool):
            if value not in ("true", "false"):
                raise ValueError(value)
            return value == "true"
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError:
        raise ConfigurationError(
            f"config key {key}: cannot parse {value!r}") from None


class Adam:
    """Bias-corrected Adam over the network's named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be > 0, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDivergedError(
                    f"non-finite gradient in parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class ProgressTracker:
    """Plateau learning-rate halving and early stopping on one signal.

    An epoch "improves" when its value undercuts the best seen by more
    than the threshold. ``plateau_patience`` flat epochs halve the rate
    (and restart the plateau count, so a persistent plateau keeps
    halving every ``plateau_patience`` epochs); ``stop_patience`` flat
    epochs in total stop the run.
    """

    def __init__(self, plateau_patience: int, stop_patience: int,
                 threshold: float, factor: float = 0.5):
        self.plateau_patience = plateau_patience
        self.stop_patience = stop_patience
        self.threshold = threshold
        self.factor = factor
        self.best = float("inf")
        self.best_epoch = 0
        self.since_best = 0
        self.since_reduction = 0

    def update(self, value: float, epoch: int) -> tuple[bool, bool, bool]:
        """Returns (improved, halve_lr_now, stop_now)."""
        if value < self.best - self.threshold:
            self.best = value
            self.best_epoch = epoch
            self.since_best = 0
            self.since_reduction = 0
            return True, False, False
        self.since_best += 1
        self.since_reduction += 1
        halve = self.since_reduction >= self.plateau_patience
        if halve:
            self.since_reduction = 0
        return False, halve, self.since_best >= self.stop_patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    lr_events: list[int] = field(default_factory=list)
    stopped_early: bool = False
    diverged: bool = False

    def to_csv(self, deterministic_only: bool = False) -> str:
        lines = ["epoch,train_loss,val_loss,lr,seconds"]
        for r in self.records:
            seconds = "" if deterministic_only else f"{r.seconds:.3f}"
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},"
                         f"{r.lr!r},{seconds}")
        return "\n".join(lines) + "\n"


@dataclass
class PreparedCase:
    case_id: str
    inputs: np.ndarray     # normalized [4,D,H,W] float32
    onehot: np.ndarray     # [1,C,D,H,W] float32
    labels: np.ndarray     # [D,H,W] uint8


def prepare_case(case: VolumeCase, num_classes: int = 4) -> PreparedCase:
    inputs = apply_modality_mask(case, ModalitySubset.full())
    onehot = np.zeros((1, num_classes) + case.labels.shape, dtype=np.float32)
    for c in range(num_classes):
        onehot[0, c] = case.labels == c
    return PreparedCase(case.case_id, inputs, onehot, case.labels)


def _model_inputs(volumes: np.ndarray, subset: ModalitySubset,
                  dtype) -> list[Tensor]:
    tensors = []
    for m in range(len(MODALITIES)):
        arr = volumes[m][None, None] if m in subset else \
            np.zeros((1, 1) + volumes.shape[1:], dtype=volumes.dtype)
        tensors.append(Tensor(arr, dtype=dtype))
    return tensors


def case_loss(net: CorrSegNet, prep: PreparedCase,
              subset: ModalitySubset) -> Tensor:
    """Total training objective for one case under one modality subset."""
    inputs = _model_inputs(prep.inputs, subset, net.dtype)
    result = net.forward(inputs)
    dice = dice_loss(result.probs, Tensor(prep.onehot, dtype=net.dtype))
    rec = None
    if result.reconstructions:
        rec = reconstruction_loss(result.reconstructions, inputs)
    return total_loss(dice, rec, net.config.lambda_rec)


@dataclass
class FitResult:
    net: CorrSegNet
    log: TrainLog
    best_params: dict[str, np.ndarray]

    def restore_best(self) -> CorrSegNet:
        for name, arr in self.best_params.items():
            self.net.params[name].data = arr.copy()
        return self.net


def _sample_subset(rng: np.random.Generator, prob: float) -> ModalitySubset:
    flags = rng.random(len(MODALITIES)) >= prob
    if not flags.any():
        flags[rng.integers(len(MODALITIES))] = True
    return ModalitySubset(flags)


def fit(config: TrainConfig, train_cases: list[VolumeCase],
        val_cases: list[VolumeCase], epoch_callback=None) -> FitResult:
    """Train a fresh network; deterministic given the config seeds.

    ``epoch_callback(epoch, net, log)`` may return True to stop early
    (used e.g. to halt once a quality target is reached). When the
    validation list is empty the training loss drives the schedule.
    """
    if not train_cases:
        raise PreconditionError("no training cases")
    net = CorrSegNet(config.network)
    train = [prepare_case(c, config.network.num_classes)
             for c in train_cases]
    val = [prepare_case(c, config.network.num_classes) for c in val_cases]
    full = ModalitySubset.full()
    rng = np.random.Generator(np.random.PCG64([config.train_seed, 0xC0DE]))
    adam = Adam(net.params, lr=config.lr)
    tracker = ProgressTracker(config.plateau_patience,
                              config.early_stop_patience,
                              config.improvement_threshold,
                              config.plateau_factor)
    log = TrainLog()
    best_params = {k: t.data.copy() for k, t in net.params.items()}

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        epoch_losses = []
        try:
            for idx in order:
                prep = train[idx]
                subset = (_sample_subset(rng, config.dropout_prob)
                          if config.modality_dropout else full)
                adam.zero_grad()
                loss = case_loss(net, prep, subset)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss on case {prep.case_id}")
                loss.backward()
                adam.step()
                epoch_losses.append(value)
        except TrainingDivergedError:
            log.diverged = True
            break

        train_loss = float(np.mean(epoch_losses))
        with no_grad():
            val_losses = [case_loss(net, p, full).item() for p in val]
        val_loss = float(np.mean(val_losses)) if val_losses else train_loss

        improved, halve, stop = tracker.update(val_loss, epoch)
        if improved:
            log.best_epoch = epoch
            best_params = {k: t.data.copy() for k, t in net.params.items()}
        if halve:
            adam.lr *= config.plateau_factor
            log.lr_events.append(epoch)
        log.records.append(EpochRecord(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            lr=adam.lr, seconds=time.perf_counter() - t0))
        if stop:
            log.stopped_early = True
            break
        if epoch_callback is not None and epoch_callback(epoch, net, log):
            break

    return FitResult(net=net, log=log, best_params=best_params)


# ---------------------------------------------------------------------------
# evaluation


def _worker_count(n_items: int) -> int:
    env = os.environ.get("CORRSEG_THREADS")
    cap = int(env) if env else 1
    return max(1, min(cap, n_items))


def _eval_case(net: CorrSegNet, prep: PreparedCase,
               subset: ModalitySubset) -> dict[str, RegionMetrics]:
    with no_grad():
        inputs = _model_inputs(prep.inputs, subset, net.dtype)
        result = net.forward(inputs, with_reconstruction=False)
    pred_labels = np.argmax(result.probs.data[0], axis=0).astype(np.uint8)
    out = {}
    for region in REGIONS:
        pm = region_extract(pred_labels, region)
        gm = region_extract(prep.labels, region)
        out[region] = RegionMetrics(dice=dice_score(pm, gm),
                                    sensitivity=sensitivity(pm, gm),
                                    hausdorff=hausdorff(pm, gm))
    return out


def predict_labels(net: CorrSegNet, case: VolumeCase,
                   subset: ModalitySubset) -> np.ndarray:
    """Argmax label volume for one case under a modality subset."""
    prep = prepare_case(case, net.config.num_classes)
    with no_grad():
        inputs = _model_inputs(prep.inputs, subset, net.dtype)
        result = net.forward(inputs, with_reconstruction=False)
    return np.argmax(result.probs.data[0], axis=0).astype(np.uint8)


def evaluate(net: CorrSegNet, cases: list[VolumeCase],
             subset: ModalitySubset) -> SubsetRow:
    """Mean per-region metrics over cases for one modality subset.

    Undefined Hausdorff values are excluded from the mean; if every
    case is undefined the aggregate stays NaN. Cases may be evaluated
    by a thread pool capped by ``CORRSEG_THREADS``; results merge in
    case order.
    """
    if not cases:
        raise PreconditionError("no cases to evaluate")
    preps = [prepare_case(c, net.config.num_classes) for c in cases]
    workers = _worker_count(len(preps))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda p: _eval_case(net, p, subset), preps))
    else:
        results = [_eval_case(net, p, subset) for p in preps]

    regions = {}
    for region in REGIONS:
        dices = [r[region].dice for r in results]
        senss = [r[region].sensitivity for r in results]
        hds = [r[region].hausdorff for r in results]
        finite_hds = [h for h in hds if not np.isnan(h)]
        regions[region] = RegionMetrics(
            dice=float(np.mean(dices)),
            sensitivity=float(np.mean(senss)),
            hausdorff=float(np.mean(finite_hds)) if finite_hds
            else float("nan"))
    return SubsetRow(subset=subset.bits, regions=regions, cases=len(cases))


def robustness_sweep(net: CorrSegNet, cases: list[VolumeCase],
                     meta: dict[str, str] | None = None) -> MetricsReport:
    """Evaluate all 15 modality combinations in the report's fixed order."""
    rows = [evaluate(net, cases, subset) for subset in SUBSET_SWEEP_ORDER]
    return MetricsReport(rows=rows, meta=dict(meta or {}))
