"""Fine-tuning, early stopping and patient-grouped cross-validation.

The recipe per fold: fine-tune AlexNet and ResNet-18 independently on the
fold's training patients, strip their heads, concatenate their penultimate
features and fine-tune a fresh linear head on top with both extractors frozen.

When augmentation is off, activations of the frozen leading stages are the
same every epoch, so they are computed once and memoised in a
:class:`FeatureCache` keyed by a hash of the stage weights. Stage-1 models of
different folds share identical pretrained prefixes, so the cache also carries
over between folds.
"""

from __future__ import annotations

import copy
import csv
import enum
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import Backbone, build_classifier
from .checkpoint import checkpoint_save
from .core import Label, Modality
from .dataio.images import StackedSample, augment, normalize, prepare_sample
from .dataio.manifest import DatasetManifest
from .dataio.splits import SplitPlan
from .ensemble import EnsembleModel, build_ensemble, soft_vote, strip_classifier
from .errors import (
    ConfigError,
    LeakageError,
    NoTrainableParametersError,
    NonFiniteLossError,
    SplitError,
    TrainingError,
)
from .metrics import Prediction, predictions_from_probs, write_predictions

log = logging.getLogger(__name__)

MEMBERS = ("alexnet", "resnet18")
MODEL_CHOICES = ("alexnet", "resnet18", "ensemble")


def stream_seed(seed: int, *names: object) -> int:
    """Independent, reproducible seed for a named random stream."""
    key = "/".join([str(seed), *map(str, names)]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


@dataclass
class TrainConfig:
    max_epochs: int
    learning_rate: float = 1e-4
    batch_size: int = 16
    patience: int = 200
    min_delta: float = 0.0
    seed: int = 0
    modality: Modality = Modality.BSE
    crop: bool = False
    augment: bool = True
    head_epochs: int | None = None
    weights: str | None = "auto"
    inflation: str = "zero"
    freeze_policy: str = "default"
    weights_dir: str | None = None
    cache_frozen: bool = True

    def __post_init__(self) -> None:
        self.modality = Modality.parse(self.modality)
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.patience < 1 or self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must lie in [1, max_epochs={self.max_epochs}]")
        if self.min_delta < 0:
            raise ConfigError("min_delta must be non-negative")

    @property
    def variant(self) -> str:
        return f"{self.modality.value}/{'crop' if self.crop else 'full'}"


# -- early stopping -------------------------------------------------------------------

class StopDecision(enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


def _snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    """Copy every tensor training can change: trainable parameters and buffers."""
    trainable = {id(p) for p in model.parameters() if p.requires_grad}
    buffers = {id(b) for b in model.buffers()}
    return {
        k: v.detach().clone()
        for k, v in model.state_dict(keep_vars=True).items()
        if id(v) in trainable or id(v) in buffers
    }


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` epochs.

    An epoch improves when ``val_loss < best - min_delta``. The weights of the
    best epoch are held in memory and put back by :meth:`restore`.
    """

    def __init__(self, patience: int = 200, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best_val_loss = math.inf
        self.best_epoch = -1
        self.epochs_since_improvement = 0
        self.best_state: dict[str, torch.Tensor] | None = None
        self.last_epoch: int | None = None
        self.stopped_epoch: int | None = None

    def update(self, val_loss: float, epoch: int, model: nn.Module | None = None) -> StopDecision:
        if self.last_epoch is not None and epoch <= self.last_epoch:
            raise ValueError(f"epochs must increase: got {epoch} after {self.last_epoch}")
        self.last_epoch = epoch
        if val_loss < self.best_val_loss - self.min_delta:
            self.best_val_loss = float(val_loss)
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            if model is not None:
                self.best_state = _snapshot(model)
            return StopDecision.CONTINUE
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement >= self.patience:
            self.stopped_epoch = epoch
            return StopDecision.STOP
        return StopDecision.CONTINUE

    def restore(self, model: nn.Module) -> None:
        if self.best_state is None:
            raise TrainingError("no best weights recorded")
        model.load_state_dict(self.best_state, strict=False)


def early_stop_update(state: EarlyStopping, val_loss: float, epoch: int) -> StopDecision:
    return state.update(val_loss, epoch)


# -- samples ------------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Samples of one partition together with the patients it is allowed to contain."""

    samples: list[StackedSample]
    patients: frozenset[str]
    tag: str = ""

    def __post_init__(self) -> None:
        self.check_membership()

    def __len__(self) -> int:
        return len(self.samples)

    def check_membership(self) -> None:
        stray = {s.patient_id for s in self.samples} - self.patients
        if stray:
            raise LeakageError(f"samples from undeclared patients {sorted(stray)[:5]} in {self.tag or 'set'}")

    @property
    def labels(self) -> torch.Tensor:
        return torch.tensor([int(s.label) for s in self.samples], dtype=torch.long)

    def inputs(self, idx: Iterable[int], *, augment_seed: int | None = None, epoch: int = 0) -> torch.Tensor:
        arrs = []
        for i in idx:
            s = self.samples[i]
            if augment_seed is not None:
                # one stream per (epoch, sample): independent of batch order and workers
                s = augment(s, np.random.default_rng([augment_seed, epoch, i]))
            arrs.append(normalize(s.tensor, s.modality))
        return torch.from_numpy(np.stack(arrs).astype(np.float32))


def load_samples(
    manifest: DatasetManifest, modality: Modality | str, crop: bool = False
) -> dict[str, StackedSample]:
    return {rec.image_id: prepare_sample(manifest, rec, modality, crop=crop) for rec in manifest.images}


def make_set(
    bank: dict[str, StackedSample], manifest: DatasetManifest, patients: Iterable[str], tag: str
) -> SampleSet:
    patients = frozenset(patients)
    samples = [bank[r.image_id] for r in manifest.images if r.patient_id in patients]
    return SampleSet(samples, patients, tag)


# -- frozen-prefix cache ---------------------------------------------------------------------

def _stage_hash(module: nn.Module) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class FeatureCache:
    """Memoised eval-mode outputs of leading backbone stages."""

    def __init__(self, batch_size: int = 32):
        self.batch_size = batch_size
        self._store: dict[tuple, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self._store)

    def _keys(self, bb: Backbone, depth: int) -> list[tuple]:
        keys, acc = [], (bb.name, bb.input_channels)
        for s in bb.stages[:depth]:
            acc = acc + (_stage_hash(s.module),)
            keys.append(acc)
        return keys

    @torch.no_grad()
    def outputs(self, bb: Backbone, depth: int, samples: SampleSet) -> torch.Tensor:
        """Output of ``bb.stages[:depth]`` for every sample, reusing shallower entries."""
        keys = self._keys(bb, depth)
        ids = [(samples.tag, s.image_id) for s in samples.samples]
        missing = [i for i, sid in enumerate(ids) if (keys[-1], sid) not in self._store]
        if missing:
            was_training = bb.training
            bb.eval()
            for lo in range(0, len(missing), self.batch_size):
                chunk = missing[lo:lo + self.batch_size]
                start = 0
                for d in range(depth - 1, 0, -1):
                    if all((keys[d - 1], ids[i]) in self._store for i in chunk):
                        start = d
                        break
                if start:
                    h = torch.stack([self._store[(keys[start - 1], ids[i])] for i in chunk])
                else:
                    h = samples.inputs(chunk)
                h = bb.run_stages(h, start, depth)
                for i, row in zip(chunk, h):
                    self._store[(keys[-1], ids[i])] = row.clone()
            bb.train(was_training)
        return torch.stack([self._store[(keys[-1], sid)] for sid in ids])

    def model_inputs(self, model: nn.Module, samples: SampleSet):
        """``(cached prefix outputs, tail function)`` or ``None`` when nothing is frozen up front."""
        if isinstance(model, Backbone):
            k = model.frozen_prefix_length()
            if k == 0:
                return None
            return self.outputs(model, k, samples), lambda h: model.run_stages(h, k)
        if isinstance(model, EnsembleModel):
            feats = [self.outputs(ext, len(ext.stages), samples) for ext in (model.extractor_a, model.extractor_b)]
            return torch.cat(feats, dim=1), model.head
        return None


# -- training loop -------------------------------------------------------------------------------

@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    initial_val_loss: float = math.nan
    best_epoch: int = -1
    stopped_epoch: int | None = None

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy", "best"])
            for e, tl, vl, va in zip(self.epoch, self.train_loss, self.val_loss, self.val_accuracy):
                w.writerow([e, repr(tl), repr(vl), repr(va), int(e == self.best_epoch)])
        return path


def _batches(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


@torch.no_grad()
def _evaluate(forward: Callable, x_source: Callable, labels: torch.Tensor, n: int, bs: int) -> tuple[float, float]:
    total, correct = 0.0, 0
    for sl in _batches(n, bs):
        logits = forward(x_source(sl))
        y = labels[sl]
        total += float(F.cross_entropy(logits, y, reduction="sum"))
        correct += int((logits.argmax(dim=1) == y).sum())
    return total / n, correct / n


def train_loop(
    model: nn.Module,
    train_set: SampleSet,
    val_set: SampleSet,
    config: TrainConfig,
    *,
    cache: FeatureCache | None = None,
    tag: str = "model",
    max_epochs: int | None = None,
) -> tuple[nn.Module, History]:
    """Minimise mean cross-entropy with Adam; return the best-epoch model and its history."""
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise NoTrainableParametersError("no trainable parameters")
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("empty training or validation set")
    if train_set.patients & val_set.patients:
        raise LeakageError("training and validation sets share patients")
    epochs = max_epochs or config.max_epochs

    torch.manual_seed(stream_seed(config.seed, "dropout", tag))
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    batch_rng = np.random.default_rng(stream_seed(config.seed, "batches", tag))
    aug_seed = stream_seed(config.seed, "augment", tag) if config.augment else None

    y_train, y_val = train_set.labels, val_set.labels
    cached = None
    if cache is not None and config.cache_frozen and not config.augment:
        cached = cache.model_inputs(model, train_set)
    if cached is not None:
        x_train, tail = cached
        x_val, _ = cache.model_inputs(model, val_set)
        train_forward = val_forward = tail

        def train_x(idx, epoch):
            return x_train[torch.as_tensor(idx)]

        def val_x(sl):
            return x_val[sl]
    else:
        train_forward = val_forward = model

        def train_x(idx, epoch):
            return train_set.inputs(idx, augment_seed=aug_seed, epoch=epoch)

        def val_x(sl):
            return val_set.inputs(range(len(val_set))[sl])

    history = History()
    model.eval()
    history.initial_val_loss, _ = _evaluate(val_forward, val_x, y_val, len(val_set), config.batch_size)
    stopper = EarlyStopping(config.patience, config.min_delta)

    for epoch in range(epochs):
        train_set.check_membership()
        val_set.check_membership()
        model.train()
        order = batch_rng.permutation(len(train_set))
        running = 0.0
        for sl in _batches(len(order), config.batch_size):
            idx = order[sl]
            logits = train_forward(train_x(idx, epoch))
            loss = F.cross_entropy(logits, y_train[torch.as_tensor(idx)])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"{tag}: non-finite loss {float(loss)} at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(idx)
        model.eval()
        val_loss, val_acc = _evaluate(val_forward, val_x, y_val, len(val_set), config.batch_size)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(f"{tag}: non-finite validation loss at epoch {epoch}")
        history.epoch.append(epoch)
        history.train_loss.append(running / len(train_set))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        log.debug("%s epoch %d train %.4f val %.4f acc %.3f", tag, epoch, history.train_loss[-1], val_loss, val_acc)
        if stopper.update(val_loss, epoch, model) is StopDecision.STOP:
            break

    stopper.restore(model)
    model.eval()
    history.best_epoch = stopper.best_epoch
    history.stopped_epoch = stopper.stopped_epoch
    return model, history


@torch.no_grad()
def predict_proba(model: nn.Module, samples: SampleSet, *, cache: FeatureCache | None = None,
                  batch_size: int = 32) -> np.ndarray:
    model.eval()
    cached = cache.model_inputs(model, samples) if cache is not None else None
    out = []
    for sl in _batches(len(samples), batch_size):
        if cached is not None:
            logits = cached[1](cached[0][sl])
        else:
            logits = model(samples.inputs(range(len(samples))[sl]))
        out.append(torch.softmax(logits, dim=1).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def to_predictions(probs: np.ndarray, samples: SampleSet) -> list[Prediction]:
    return predictions_from_probs(
        probs, [int(s.label) for s in samples.samples],
        [s.image_id for s in samples.samples], [s.patient_id for s in samples.samples],
    )


# -- cross-validation -------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    train_patients: list[str]
    val_patients: list[str]
    predictions: dict[str, list[Prediction]]
    histories: dict[str, History]
    checkpoints: dict[str, Path] = field(default_factory=dict)
    models: dict[str, nn.Module] = field(default_factory=dict)


@dataclass
class CVResult:
    model: str
    config: TrainConfig
    plan: SplitPlan
    folds: list[FoldResult]

    def predictions(self, name: str | None = None) -> list[list[Prediction]]:
        name = name or self.model
        return [f.predictions[name] for f in self.folds]

    @property
    def available(self) -> list[str]:
        return list(self.folds[0].predictions) if self.folds else []


def _check_fold_classes(manifest: DatasetManifest, patients: Sequence[str], what: str) -> None:
    labels = {manifest.label_of(p) for p in patients}
    if len(labels) < 2:
        raise SplitError(f"{what} contains a single class; stratification failed")


def _train_member(name: str, k: int, train_set, val_set, config: TrainConfig, cache, weights_seed: int):
    bb = build_classifier(
        name, config.modality.channels, weights=config.weights,
        freeze_policy=config.freeze_policy, inflation=config.inflation,
        seed=weights_seed, head_seed=stream_seed(config.seed, "head-init", name, k),
        cache_dir=config.weights_dir,
    )
    return train_loop(bb, train_set, val_set, config, cache=cache, tag=f"{name}/fold{k}")


def cross_validate(
    manifest: DatasetManifest,
    plan: SplitPlan,
    config: TrainConfig,
    model: str = "ensemble",
    *,
    cache: FeatureCache | None = None,
    run_dir: str | Path | None = None,
    save_checkpoints: bool = True,
    keep_models: bool = False,
    folds: Sequence[int] | None = None,
) -> CVResult:
    """Train and evaluate ``model`` on every fold of ``plan`` against the fixed test set.

    With ``model="ensemble"`` each fold also yields predictions of the two
    stage-1 members (``alexnet``, ``resnet18``) and of their soft vote
    (``voting``).
    """
    model = model.lower()
    if model == "resnet":
        model = "resnet18"
    if model not in MODEL_CHOICES:
        raise ConfigError(f"unknown model {model!r}; choose from {MODEL_CHOICES}")
    plan.validate(manifest)
    if plan.n_folds < 2:
        raise SplitError("cross-validation needs at least two folds")
    cache = cache if cache is not None else FeatureCache()
    run_dir = Path(run_dir) if run_dir is not None else None

    bank = load_samples(manifest, config.modality, config.crop)
    variant = config.variant
    _check_fold_classes(manifest, sorted(plan.test_patients), "test set")
    test_set = make_set(bank, manifest, plan.test_patients, f"{variant}")
    # the "pretrained" body is the same for every fold and member role
    weights_seed = {name: stream_seed(config.seed, "weights", name) for name in MEMBERS}

    results = []
    for k in (folds if folds is not None else range(plan.n_folds)):
        train_ids, val_ids = plan.fold_partition(k)
        _check_fold_classes(manifest, train_ids, f"fold {k} training set")
        _check_fold_classes(manifest, val_ids, f"fold {k} validation set")
        train_set = make_set(bank, manifest, train_ids, variant)
        val_set = make_set(bank, manifest, val_ids, variant)
        log.info("fold %d: %d train / %d val / %d test images", k, len(train_set), len(val_set), len(test_set))

        preds: dict[str, list[Prediction]] = {}
        hists: dict[str, History] = {}
        models: dict[str, nn.Module] = {}
        names = MEMBERS if model == "ensemble" else (model,)
        probs = {}
        for name in names:
            net, hist = _train_member(name, k, train_set, val_set, config, cache, weights_seed[name])
            probs[name] = predict_proba(net, test_set, cache=cache)
            preds[name], hists[name], models[name] = to_predictions(probs[name], test_set), hist, net

        if model == "ensemble":
            mean, _ = soft_vote(probs["alexnet"], probs["resnet18"])
            preds["voting"] = to_predictions(mean, test_set)
            member_ckpts = {}
            if run_dir is not None and save_checkpoints:
                for name in MEMBERS:
                    member_ckpts[name] = checkpoint_save(models[name], run_dir / f"fold_{k}" / f"{name}.ckpt")
            ext_a = strip_classifier(models["alexnet"] if keep_models is False else copy.deepcopy(models["alexnet"]))
            ext_b = strip_classifier(models["resnet18"] if keep_models is False else copy.deepcopy(models["resnet18"]))
            ens = build_ensemble(ext_a, ext_b, seed=stream_seed(config.seed, "ensemble-head", k))
            ens, hist = train_loop(ens, train_set, val_set, config, cache=cache, tag=f"ensemble/fold{k}",
                                   max_epochs=config.head_epochs)
            probs["ensemble"] = predict_proba(ens, test_set, cache=cache)
            preds["ensemble"] = to_predictions(probs["ensemble"], test_set)
            hists["ensemble"] = hist
            models["ensemble"] = ens
        else:
            member_ckpts = {}

        fold = FoldResult(k, train_ids, val_ids, preds, hists)
        if run_dir is not None:
            fdir = run_dir / f"fold_{k}"
            fdir.mkdir(parents=True, exist_ok=True)
            for name, plist in preds.items():
                write_predictions(plist, fdir / f"predictions_{name}.csv")
            for name, hist in hists.items():
                hist.write_csv(fdir / f"history_{name}.csv")
            if save_checkpoints:
                fold.checkpoints.update(member_ckpts)
                fold.checkpoints[model] = checkpoint_save(models[model], fdir / f"{model}.ckpt",
                                                          extra={"fold": k, "variant": variant})
        if keep_models:
            fold.models = models
        results.append(fold)
    return CVResult(model, config, plan, results)
