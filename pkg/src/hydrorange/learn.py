"""Dataset splitting, training with Adam, fine-tuning and metrics.

The interleaved 6-fold assignment ``fold(i) = i mod 6`` drives the default
in-domain protocol: four folds train, one validates, one tests.  Training
minimizes mean squared error in raw kilometers with bias-corrected Adam and
returns the checkpoint with the lowest validation loss.  Cross-domain
adaptation fine-tunes all parameters on a seeded random fraction of the
target set and evaluates on the remainder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .agc import AgcParams, apply_agc_set
from .errors import DataError, NumericError
from .features import FeatureSet
from .net import Model

FOLDS = 6
FINETUNE_FRACTIONS = (0.0, 0.15, 0.30)
EVAL_BATCH = 256


@dataclass(frozen=True)
class Hyper:
    batch_size: int = 32
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 15
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise DataError("batch_size and epochs must be positive")
        if self.lr < 0:
            raise DataError("learning rate cannot be negative")


@dataclass
class MetricsReport:
    mae_km: float
    mse_km2: float
    pcl5_percent: float
    predictions: list = field(default_factory=list)  # rows (index, y_km, yhat_km)

    @classmethod
    def from_predictions(cls, indices, y, yhat) -> "MetricsReport":
        y = np.asarray(y, dtype=np.float64)
        yhat = np.asarray(yhat, dtype=np.float64)
        rows = [(int(i), float(a), float(b)) for i, a, b in zip(indices, y, yhat)]
        return cls(mae(y, yhat), mse(y, yhat), pcl5(y, yhat), rows)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mae_km": self.mae_km,
                "mse_km2": self.mse_km2,
                "pcl5_percent": self.pcl5_percent,
                "predictions": [[i, y, yh] for i, y, yh in self.predictions],
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        rows = [(int(i), float(y), float(yh)) for i, y, yh in obj["predictions"]]
        return cls(obj["mae_km"], obj["mse_km2"], obj["pcl5_percent"], rows)


# ---------------------------------------------------------------------------
# folds and metrics

def assign_folds(n: int) -> np.ndarray:
    """fold(i) = i mod 6 over positional indices."""
    if n < FOLDS:
        raise DataError(f"need at least {FOLDS} segments for a {FOLDS}-fold split, got {n}")
    return np.arange(n, dtype=np.int64) % FOLDS


def split(
    dataset: FeatureSet, val_fold: int = 4, test_fold: int = 5
) -> tuple[FeatureSet, FeatureSet, FeatureSet]:
    """Partition into (train, val, test); remaining folds all train."""
    if not 0 <= val_fold < FOLDS or not 0 <= test_fold < FOLDS:
        raise DataError(f"fold ids must lie in [0, {FOLDS})")
    if val_fold == test_fold:
        raise DataError("validation and test folds overlap")
    folds = assign_folds(len(dataset))
    return (
        dataset.subset((folds != val_fold) & (folds != test_fold)),
        dataset.subset(folds == val_fold),
        dataset.subset(folds == test_fold),
    )


def _check_lengths(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise DataError(f"metric inputs must be equal-length vectors, got {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise DataError("metric of empty vectors is undefined")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _check_lengths(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mae(y, yhat) -> float:
    y, yhat = _check_lengths(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def pcl5(y, yhat) -> float:
    """Percentage of predictions with relative error at most 5%.

    The boundary counts: a prediction off by exactly 5% is credible.  The
    comparison |y - yhat| * 100 <= 5 * y avoids a rounding step at the
    boundary.
    """
    y, yhat = _check_lengths(y, yhat)
    if np.any(y <= 0):
        raise DataError("pcl5 needs positive ground-truth ranges")
    credible = np.abs(y - yhat) * 100.0 <= 5.0 * y
    return float(100.0 * np.mean(credible))


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam over a flat parameter store."""

    def __init__(self, params: dict, h: Hyper):
        self.params = params
        self.h = h
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        h = self.h
        self.t += 1
        bc1 = 1.0 - h.adam_beta1 ** self.t
        bc2 = 1.0 - h.adam_beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k]
            v = self.v[k]
            m *= h.adam_beta1
            m += (1.0 - h.adam_beta1) * g
            v *= h.adam_beta2
            v += (1.0 - h.adam_beta2) * np.square(g)
            p.data -= h.lr * (m / bc1) / (np.sqrt(v / bc2) + h.adam_eps)


# ---------------------------------------------------------------------------
# prediction / evaluation

def predict(model: Model, fs: FeatureSet, batch: int = EVAL_BATCH) -> np.ndarray:
    """Deterministic eval-mode predictions for every segment in the set."""
    out = np.empty(len(fs), dtype=np.float64)
    for s in range(0, len(fs), batch):
        sl = slice(s, min(s + batch, len(fs)))
        out[sl] = model.forward(fs.logmel[sl], fs.gcc[sl], train=False)
    return out


def evaluate(model: Model, test_set: FeatureSet, agc: AgcParams | None) -> MetricsReport:
    if len(test_set) == 0:
        raise DataError("cannot evaluate on an empty set")
    apply_agc_set(test_set, agc)
    yhat = predict(model, test_set)
    return MetricsReport.from_predictions(test_set.indices, test_set.ranges_km, yhat)


# ---------------------------------------------------------------------------
# training

def train(
    model: Model,
    train_set: FeatureSet,
    val_set: FeatureSet | None,
    h: Hyper,
    agc: AgcParams | None,
) -> tuple[Model, list[tuple[int, float, float]]]:
    """Mini-batch MSE training; returns (model at best validation MSE,
    history rows (epoch, train_mse, val_mse)).

    Gain control is applied per segment up front (it is a deterministic,
    parameter-free input map), then each epoch runs a seeded shuffle and
    bias-corrected Adam updates.  Without a validation set the final-epoch
    weights are returned.
    """
    if len(train_set) == 0:
        raise DataError("cannot train on an empty set")
    apply_agc_set(train_set, agc)
    if val_set is not None and len(val_set):
        apply_agc_set(val_set, agc)
    else:
        val_set = None

    rng = np.random.default_rng(h.seed)
    adam = Adam(model.params, h)
    n = len(train_set)
    y_all = train_set.ranges_km.astype(np.float64)
    history: list[tuple[int, float, float]] = []
    best_val = np.inf
    best_snapshot = None

    for epoch in range(1, h.epochs + 1):
        order = rng.permutation(n) if h.shuffle else np.arange(n)
        sq_sum = 0.0
        for bstart in range(0, n, h.batch_size):
            idx = order[bstart : bstart + h.batch_size]
            lm = train_set.logmel[idx]
            gc = train_set.gcc[idx]
            yb = y_all[idx]
            pred = model.forward_graph(lm, gc, train=True, rng=rng)
            diff = ad.sub(pred, ad.Tensor(yb.astype(pred.data.dtype)))
            loss = ad.mean_all(ad.mul(diff, diff))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, batch {bstart // h.batch_size}"
                )
            model.zero_grad()
            loss.backward()
            adam.step()
            model._last_out = None
            sq_sum += loss_val * len(idx)
        train_mse = sq_sum / n

        if val_set is not None:
            val_mse = mse(val_set.ranges_km, predict(model, val_set))
            if val_mse < best_val:
                best_val = val_mse
                best_snapshot = model.clone_weights()
        else:
            val_mse = float("nan")
        history.append((epoch, train_mse, val_mse))

    if best_snapshot is not None:
        model.load_weights(best_snapshot)
    return model, history


def finetune(
    pretrained: Model,
    target_set: FeatureSet,
    fraction: float,
    h: Hyper,
    seed: int,
    agc: AgcParams | None,
    allow_any_fraction: bool = False,
    epochs_override: int | None = None,
) -> tuple[Model, FeatureSet]:
    """Adapt a source-trained model with a seeded random fraction of the
    target domain; evaluation uses the unsampled remainder.

    Fraction 0 is the zero-shot case: the model returns unchanged and the
    whole target set is the evaluation set.  Fine-tuning updates every
    parameter at the same learning rate; the default budget is a quarter of
    the usual epoch count unless ``epochs_override`` says otherwise.
    """
    if not allow_any_fraction and not any(abs(fraction - f) < 1e-12 for f in FINETUNE_FRACTIONS):
        raise DataError(
            f"fraction {fraction} not in {FINETUNE_FRACTIONS}; pass --any-fraction to override"
        )
    if not 0.0 <= fraction < 1.0:
        raise DataError(f"fraction must lie in [0, 1), got {fraction}")
    n = len(target_set)
    k = int(np.floor(fraction * n))
    if k == 0:
        return pretrained, target_set
    chosen = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    tune_set = target_set.subset(mask)
    eval_set = target_set.subset(~mask)
    epochs = epochs_override if epochs_override is not None else max(1, h.epochs // 4)
    ft_hyper = replace(h, epochs=epochs, seed=seed)
    # the small tuning subset doubles as the validation monitor
    model, _ = train(pretrained, tune_set, tune_set, ft_hyper, agc)
    return model, eval_set


def history_to_csv(history, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for epoch, tr, va in history:
            fh.write(f"{epoch},{tr:.8g},{va:.8g}\n")


def constant_mean_baseline_mae(train_y, test_y) -> float:
    """MAE of always predicting the training-set mean range."""
    train_y = np.asarray(train_y, dtype=np.float64)
    test_y = np.asarray(test_y, dtype=np.float64)
    return mae(test_y, np.full_like(test_y, train_y.mean()))
