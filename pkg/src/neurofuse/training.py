"""SGD with momentum, transfer-learning freeze masks, and the training loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .architecture import CascadeHead, Network
from .data import prepare_input, read_volume, sample_rng
from .metrics import auc_micro
from .tensor import Tensor

log = logging.getLogger(__name__)

TRANSFER_MODES = ("baseline", "fine_tune", "retrain", "cascade")
DEFAULT_EPOCHS = {"baseline": 0, "fine_tune": 50, "retrain": 200, "cascade": 200}
LOG_FIELDS = ("epoch", "split", "loss", "accuracy", "micro_auc")


@dataclass
class TrainConfig:
    transfer_mode: str = "retrain"
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int | None = None
    seed: int = 0
    augment: bool = True
    # keep the parameters of the epoch with the best validation micro-AUC
    select_best: bool = True

    def __post_init__(self):
        if self.transfer_mode not in TRANSFER_MODES:
            raise ValueError(f"transfer_mode must be one of {TRANSFER_MODES}, got {self.transfer_mode!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.transfer_mode]
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def freeze_mask(names: Sequence[str], mode: str) -> dict[str, bool]:
    """True marks a trainable parameter."""
    if mode == "baseline":
        return {n: False for n in names}
    if mode == "fine_tune":
        return {n: n.startswith(("fc1.", "fc2.")) for n in names}
    if mode == "retrain":
        return {n: True for n in names}
    if mode == "cascade":
        return {n: n.startswith("head.") for n in names}
    raise ValueError(f"unknown transfer mode {mode!r}")


def sgd_momentum_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
    mu: float,
    mask: Mapping[str, bool],
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """v <- mu * v + g; theta <- theta - lr * v, for unmasked parameters only.

    Frozen parameters (and their velocities) are passed through as the same
    objects.
    """
    new_params = dict(params)
    new_vel = dict(state.velocity)
    for name, theta in params.items():
        if not mask.get(name, False):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient {g.shape} does not match parameter {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise ValueError(f"{name}: velocity {v.shape} does not match parameter {theta.shape}")
        v = (mu * v + g).astype(theta.dtype, copy=False)
        new_vel[name] = v
        new_params[name] = (theta - lr * v).astype(theta.dtype, copy=False)
    return new_params, OptimizerState(new_vel)


# ---------------------------------------------------------------------------
# examples


@dataclass
class Example:
    session_id: str
    patient_id: str
    label: int
    source: object  # path to a volume file or an in-memory array

    def load(self) -> np.ndarray:
        if isinstance(self.source, np.ndarray):
            return self.source
        return read_volume(self.source).data


class _VolumeCache:
    def __init__(self):
        self._arrays: dict[int, np.ndarray] = {}

    def get(self, ex: Example) -> np.ndarray:
        key = id(ex)
        if key not in self._arrays:
            self._arrays[key] = ex.load()
        return self._arrays[key]


def _batch(examples: Sequence[Example], idx, cache: _VolumeCache, rngs=None) -> np.ndarray:
    vols = []
    for j, i in enumerate(idx):
        rng = None if rngs is None else rngs[j]
        vols.append(prepare_input(cache.get(examples[i]), rng))
    return np.stack(vols)[:, None]


def predict(network: Network, examples: Sequence[Example], batch_size: int = 4, cache=None) -> np.ndarray:
    """Class probabilities on centre-cropped inputs."""
    cache = cache or _VolumeCache()
    out = []
    for start in range(0, len(examples), batch_size):
        idx = range(start, min(start + batch_size, len(examples)))
        out.append(network.forward(_batch(examples, idx, cache)))
    return np.concatenate(out) if out else np.zeros((0, 3))


def encode_examples(network: Network, examples: Sequence[Example], batch_size: int = 4) -> np.ndarray:
    cache = _VolumeCache()
    out = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            idx = range(start, min(start + batch_size, len(examples)))
            out.append(network.encode(_batch(examples, idx, cache)).data)
    return np.concatenate(out) if out else np.zeros((0, 1024), np.float32)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: Network | CascadeHead
    log: list[dict]
    best_epoch: int | None = None


def _summary(epoch: int, split: str, loss: float, probs: np.ndarray, y: np.ndarray) -> dict:
    acc = float(np.mean(np.argmax(probs, axis=1) == y)) if len(y) else float("nan")
    micro = auc_micro(probs, y) if len(y) else None
    return {"epoch": epoch, "split": split, "loss": float(loss), "accuracy": acc, "micro_auc": micro}


def _eval_loss(probs: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(y)), y], 1e-12, 1.0)
    return float(-np.mean(np.log(p)))


def _fit(
    model,
    n_train: int,
    y_train: np.ndarray,
    logits_fn: Callable[[object, np.ndarray, int], Tensor],
    config: TrainConfig,
    predict_val: Callable[[object], np.ndarray] | None,
    y_val: np.ndarray | None,
) -> TrainResult:
    mask = freeze_mask(list(model.params), config.transfer_mode)
    for name, t in model.params.items():
        t.tracked = mask[name]
    state = OptimizerState()
    rows: list[dict] = []
    best_score, best_state, best_epoch = None, None, None
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n_train)
        total_loss = 0.0
        probs = np.zeros((n_train, 3))
        for start in range(0, n_train, config.batch_size):
            idx = order[start: start + config.batch_size]
            logits = logits_fn(model, idx, epoch)
            loss, p = T.softmax_cross_entropy(logits, y_train[idx])
            probs[idx] = p
            total_loss += float(loss.data) * len(idx)
            if not loss.tracked:
                continue
            for t in model.params.values():
                t.zero_grad()
            T.backward(loss)
            arrays = {k: t.data for k, t in model.params.items()}
            grads = {k: t.grad for k, t in model.params.items()}
            arrays, state = sgd_momentum_step(arrays, grads, state, config.learning_rate, config.momentum, mask)
            for name, arr in arrays.items():
                if mask[name]:
                    model.params[name] = Tensor(arr, tracked=True)
        rows.append(_summary(epoch, "train", total_loss / n_train, probs, y_train))
        log.info("epoch %d train loss %.4f acc %.3f", epoch, rows[-1]["loss"], rows[-1]["accuracy"])
        if predict_val is not None and y_val is not None and len(y_val):
            vp = predict_val(model)
            row = _summary(epoch, "validation", _eval_loss(vp, y_val), vp, y_val)
            rows.append(row)
            score = row["micro_auc"]
            if config.select_best and score is not None and (best_score is None or score > best_score):
                best_score, best_epoch = score, epoch
                best_state = {k: t.data for k, t in model.params.items()}
    for t in model.params.values():
        t.zero_grad()
        t.tracked = True
    if best_state is not None:
        for name, arr in best_state.items():
            model.params[name] = Tensor(arr, tracked=True)
    return TrainResult(model, rows, best_epoch)


def train(
    network: Network,
    examples: Sequence[Example],
    config: TrainConfig,
    validation: Sequence[Example] | None = None,
) -> TrainResult:
    """Train a copy of ``network``; the input network is left untouched."""
    if config.transfer_mode == "cascade":
        raise ValueError("cascade mode trains a CascadeHead; use train_cascade")
    if config.epochs > 0 and not examples:
        raise ValueError("empty training set")
    model = network.copy()
    cache = _VolumeCache()
    y = np.array([ex.label for ex in examples], dtype=np.int64)

    def logits_fn(m: Network, idx, epoch):
        rngs = [sample_rng(config.seed, epoch, int(i)) for i in idx] if config.augment else None
        return m.logits(_batch(examples, idx, cache, rngs))

    predict_val = y_val = None
    if validation:
        val_cache = _VolumeCache()
        y_val = np.array([ex.label for ex in validation], dtype=np.int64)

        def predict_val(m):
            return predict(m, validation, config.batch_size, val_cache)

    return _fit(model, len(examples), y, logits_fn, config, predict_val, y_val)


def pair_encodings(
    t1: Mapping[str, np.ndarray], flair: Mapping[str, np.ndarray], labels: Mapping[str, int]
) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Align T1/FLAIR encodings by session; any unpaired session is an error."""
    for sid in sorted(set(t1) | set(flair) | set(labels)):
        have = [name for name, d in (("T1", t1), ("FLAIR", flair), ("label", labels)) if sid in d]
        if len(have) != 3:
            raise ValueError(f"session {sid} is unpaired: has only {', '.join(have)}")
    sessions = sorted(labels)
    return (
        sessions,
        np.stack([np.asarray(t1[s], dtype=np.float32) for s in sessions]),
        np.stack([np.asarray(flair[s], dtype=np.float32) for s in sessions]),
        np.array([labels[s] for s in sessions], dtype=np.int64),
    )


def train_cascade(
    head: CascadeHead,
    t1: Mapping[str, np.ndarray],
    flair: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    config: TrainConfig | None = None,
    validation: tuple[Mapping, Mapping, Mapping] | None = None,
) -> TrainResult:
    """Train the classifier of a cascade head on fixed backbone encodings."""
    config = config or TrainConfig(transfer_mode="cascade")
    if config.transfer_mode != "cascade":
        raise ValueError("train_cascade requires transfer_mode='cascade'")
    _, a, b, y = pair_encodings(t1, flair, labels)
    if config.epochs > 0 and len(y) == 0:
        raise ValueError("empty training set")
    model = head.copy()

    def logits_fn(m: CascadeHead, idx, epoch):
        return m.logits(a[idx], b[idx])

    predict_val = y_val = None
    if validation is not None:
        _, va, vb, y_val = pair_encodings(*validation)

        def predict_val(m):
            return m.forward(va, vb)

    return _fit(model, len(y), y, logits_fn, config, predict_val, y_val)


def write_log(path, rows: Sequence[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow(["" if r[k] is None else r[k] for k in LOG_FIELDS])
