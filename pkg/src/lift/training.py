"""Losses, gradients, Adam, gradient checking and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import normalize
from .container import atomic_write_text
from .data import Dataset, gather_windows, split, window_starts
from .errors import ConfigError, ShapeError, TrainingDiverged
from .lead import LeadCache, LeadTable, estimate_window
from .model import LiftModel, ModelConfig

logger = logging.getLogger(__name__)

MODES = ("joint", "frozen-backbone", "pretrain-then-joint")
LR_GRID = (0.5, 0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00005, 0.00001)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: dict, grads: dict, moments: dict | None, lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, dict]:
    """One bias-corrected Adam update over the keys of ``grads``.

    ``moments`` is ``{"m": {...}, "v": {...}}`` or ``None`` for a fresh start.
    Returns new dicts; the inputs are not modified. Keys absent from ``grads``
    pass through unchanged.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m_old = {} if moments is None else moments["m"]
    v_old = {} if moments is None else moments["v"]
    new_params = dict(params)
    m_new, v_new = dict(m_old), dict(v_old)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m = beta1 * m_old.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * v_old.get(k, 0.0) + (1.0 - beta2) * (g * g)
        new_params[k] = params[k] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, {"m": m_new, "v": v_new}


# ---------------------------------------------------------------------------
# gradients


def trainable_names(model: LiftModel, mode: str) -> list[str]:
    if mode == "frozen-backbone":
        return model.refiner_names()
    if mode == "backbone":
        return model.backbone_names()
    return list(model.params)


def loss_and_grads(model: LiftModel, lookback, horizon, leads=None, mode: str = "joint",
                   backbone_preds=None) -> tuple[float, dict, np.ndarray]:
    """Batch-mean MSE of raw-scale predictions and its gradient for every tensor.

    ``mode`` is ``"joint"``, ``"frozen-backbone"`` (backbone gradients are
    reported as zero) or ``"backbone"`` (the refiner is bypassed entirely).
    Returns ``(loss, grads, predictions)``.
    """
    names = set(trainable_names(model, mode))
    tensors = {k: ad.Tensor(v, requires_grad=k in names, name=k) for k, v in model.params.items()}
    parts = model.forward_parts(lookback, leads, params=tensors, backbone_preds=backbone_preds,
                                refine=mode != "backbone")
    out = parts["refined"]
    horizon = np.asarray(horizon, dtype=np.float64)
    if ad.value(out).shape != horizon.shape:
        raise ShapeError(f"prediction shape {ad.value(out).shape} != truth shape {horizon.shape}")
    loss = ad.mean(ad.square(ad.sub(out, horizon)))
    keys = list(model.params)
    raw = ad.grad(loss, [tensors[k] for k in keys])
    grads = {k: (g if k in names else np.zeros_like(model.params[k])) for k, g in zip(keys, raw)}
    return float(ad.value(loss)), grads, np.array(ad.value(out))


@dataclass(frozen=True)
class GradCheck:
    name: str
    rel_error: float
    abs_error: float
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.rel_error <= tol


def gradient_check(model: LiftModel, lookback, horizon, leads=None, mode: str = "joint",
                   h: float = 1e-5, floor: float = 1e-7, max_entries: int | None = None,
                   seed: int = 0) -> list[GradCheck]:
    """Compare tape gradients with central finite differences, tensor by tensor.

    The relative error of a tensor is ``||g - g_fd|| / max(||g||, ||g_fd||, floor)``.
    With the shift gradient detached, the finite differences hold the
    shifted forecasts at their base-point values so both sides differentiate
    the same function. ``max_entries`` limits checking to a random subset of
    entries per tensor.
    """
    lookback = np.asarray(lookback, dtype=np.float64)
    horizon = np.asarray(horizon, dtype=np.float64)
    backbone_preds = None
    if mode == "frozen-backbone":
        backbone_preds = np.array(model.forward_parts(lookback, leads, refine=False)["preds_norm"])
    _, grads, _ = loss_and_grads(model, lookback, horizon, leads, mode, backbone_preds)

    shift = None
    if model.config.use_refiner and not model.config.grad_through_shift and mode != "backbone":
        shift = np.array(model.forward_parts(lookback, leads, backbone_preds=backbone_preds)["preds_norm"])

    def loss_at(params):
        out = model.forward_parts(lookback, leads, params=params, backbone_preds=backbone_preds,
                                  shift_preds=shift, refine=mode != "backbone")["refined"]
        return float(np.mean((out - horizon) ** 2))

    rng = np.random.default_rng(seed)
    results = []
    for name in trainable_names(model, mode):
        base = model.params[name]
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        fd = np.empty(len(flat_idx))
        for n, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, base.shape)
            bumped = base.copy()
            bumped[idx] = base[idx] + h
            plus = loss_at({**model.params, name: bumped})
            bumped[idx] = base[idx] - h
            minus = loss_at({**model.params, name: bumped})
            fd[n] = (plus - minus) / (2 * h)
        an = grads[name].reshape(-1)[flat_idx]
        diff = np.linalg.norm(an - fd)
        denom = max(np.linalg.norm(an), np.linalg.norm(fd), floor)
        results.append(GradCheck(name, float(diff / denom), float(np.max(np.abs(an - fd), initial=0.0)), len(flat_idx)))
    return results


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    L: int = 96
    H: int = 24
    K: int = 8
    N: int = 4
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    mode: str = "joint"
    pretrain_epochs: int = 0
    patience: int = 5
    grad_through_shift: bool = False
    state_input: str = "normalized"
    per_channel_backbone: bool = False
    use_refiner: bool = True
    strict_boundaries: bool = False
    lr_grid: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if any(not lr > 0 for lr in self.lr_grid):
            raise ConfigError("lr_grid entries must be positive")

    def model_config(self, C: int) -> ModelConfig:
        return ModelConfig(C=C, L=self.L, H=self.H, K=self.K, N=self.N, state_input=self.state_input,
                           grad_through_shift=self.grad_through_shift,
                           per_channel_backbone=self.per_channel_backbone, use_refiner=self.use_refiner)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    train_mae: float
    val_mse: float
    val_mae: float
    lr: float
    seconds: float
    phase: str = "joint"


LOG_COLUMNS = ("epoch", "train_mse", "train_mae", "val_mse", "val_mae", "lr", "seconds")


def epoch_log_csv(records: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in records:
        w.writerow([r.epoch, repr(r.train_mse), repr(r.train_mae), repr(r.val_mse), repr(r.val_mae),
                    repr(r.lr), f"{r.seconds:.3f}"])
    return buf.getvalue()


def write_epoch_log(records: list[EpochRecord], path) -> None:
    atomic_write_text(path, epoch_log_csv(records))


def leads_for(values: np.ndarray, starts, L: int, K: int, cache: LeadCache | None = None) -> LeadTable:
    """Lead tables for lookback windows starting at ``starts``, from the cache where possible."""
    tables = []
    for s in np.asarray(starts, dtype=np.int64):
        if cache is not None and s in cache:
            tables.append(cache.lookup(s))
        else:
            window = values[s : s + L].T
            tables.append(estimate_window(normalize.apply(window, normalize.fit(window)), K))
    if not tables:
        raise ShapeError("no windows")
    return LeadTable.stack(tables)


@dataclass
class WindowSet:
    """Materialized windows of one split."""

    starts: np.ndarray
    lookback: np.ndarray
    horizon: np.ndarray
    leads: LeadTable | None

    def __len__(self) -> int:
        return len(self.starts)

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.starts[idx], self.lookback[idx], self.horizon[idx],
                         None if self.leads is None else self.leads[idx])


def make_windows(dataset: Dataset, span: range, L: int, H: int, K: int, cache: LeadCache | None = None,
                 strict_boundaries: bool = False, with_leads: bool = True, stride: int = 1) -> WindowSet:
    starts = window_starts(span, L, H, stride, strict_boundaries)
    if len(starts) == 0:
        empty = np.zeros((0, dataset.C, L))
        return WindowSet(starts, empty, np.zeros((0, dataset.C, H)), None)
    lookback, horizon = gather_windows(dataset.values, starts, L, H)
    leads = leads_for(dataset.values, starts, L, K, cache) if with_leads else None
    return WindowSet(starts, lookback, horizon, leads)


def predict(model: LiftModel, windows: WindowSet, chunk: int = 512, refine: bool = True) -> np.ndarray:
    outs = []
    for lo in range(0, len(windows), chunk):
        w = windows.take(slice(lo, lo + chunk))
        outs.append(np.asarray(model.forward_parts(w.lookback, w.leads, refine=refine)["refined"]))
    return np.concatenate(outs) if outs else np.zeros_like(windows.horizon)


def evaluate(model: LiftModel, windows: WindowSet, refine: bool = True) -> tuple[float, float]:
    if len(windows) == 0:
        return float("nan"), float("nan")
    pred = predict(model, windows, refine=refine)
    return mse(pred, windows.horizon), mae(pred, windows.horizon)


def _phases(cfg: TrainConfig, model: LiftModel) -> list[tuple[str, int]]:
    if not model.config.use_refiner:
        return [("backbone", cfg.pretrain_epochs + cfg.epochs)]
    pre = [("backbone", cfg.pretrain_epochs)] if cfg.pretrain_epochs else []
    if cfg.mode == "joint":
        return pre + [("joint", cfg.epochs)]
    if cfg.mode == "frozen-backbone":
        return pre + [("frozen-backbone", cfg.epochs)]
    return pre + [("joint", cfg.epochs)]


def train(model: LiftModel, dataset: Dataset, cache: LeadCache | None, config: TrainConfig,
          splits: tuple[range, range, range] | None = None) -> tuple[LiftModel, list[EpochRecord]]:
    """Train ``model`` and return the checkpoint with the best validation MSE plus the epoch log.

    With ``config.lr_grid`` set, one run per learning rate is made from the
    same starting point and the run with the best validation MSE is returned.
    """
    if config.lr_grid:
        best = None
        for lr in config.lr_grid:
            m, log = train(model, dataset, cache, replace(config, lr=lr, lr_grid=()), splits)
            score = min((r.val_mse for r in log), default=np.inf)
            if best is None or score < best[0]:
                best = (score, m, log)
        return best[1], best[2]

    if config.epochs == 0 and config.pretrain_epochs == 0:
        return model, []
    cfg_m = model.config
    if (cfg_m.L, cfg_m.H) != (config.L, config.H):
        raise ConfigError("model and training config disagree on L/H")
    train_span, val_span, _ = splits or split(dataset)
    if cache is not None and cfg_m.use_refiner and (cache.L, cache.K) != (cfg_m.L, cfg_m.K):
        raise ConfigError(f"lead cache built with L={cache.L}, K={cache.K}; model needs L={cfg_m.L}, K={cfg_m.K}")
    need_leads = cfg_m.use_refiner
    tr = make_windows(dataset, train_span, cfg_m.L, cfg_m.H, cfg_m.K, cache, config.strict_boundaries, need_leads)
    va = make_windows(dataset, val_span, cfg_m.L, cfg_m.H, cfg_m.K, cache, config.strict_boundaries, need_leads)
    if len(tr) == 0:
        raise ConfigError("training split has no complete windows")

    rng = np.random.default_rng(config.seed)
    current = model
    best_model, best_val = model, np.inf
    log: list[EpochRecord] = []
    epoch = 0
    for phase, n_epochs in _phases(config, model):
        moments, step = None, 0
        stale = 0
        phase_best = np.inf
        frozen_preds = None
        if phase == "frozen-backbone":
            frozen_preds = current.forward_parts(tr.lookback, refine=False)["preds_norm"]
        names = set(trainable_names(current, phase))
        for _ in range(n_epochs):
            epoch += 1
            t0 = time.perf_counter()
            order = rng.permutation(len(tr))
            sq = ab = 0.0
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo : lo + config.batch_size]
                batch = tr.take(idx)
                bp = None if frozen_preds is None else frozen_preds[idx]
                loss, grads, pred = loss_and_grads(current, batch.lookback, batch.horizon, batch.leads,
                                                   phase, backbone_preds=bp)
                if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model=best_model,
                                           snapshot={"epoch": epoch, "batch_start": lo, "loss": loss})
                step += 1
                new_params, moments = adam_step(current.params, {k: grads[k] for k in grads if k in names},
                                                moments, config.lr, step)
                current = current.with_params(new_params)
                sq += float(np.sum((pred - batch.horizon) ** 2))
                ab += float(np.sum(np.abs(pred - batch.horizon)))
            denom = tr.horizon.size
            val_mse, val_mae = evaluate(current, va, refine=phase != "backbone" and cfg_m.use_refiner)
            rec = EpochRecord(epoch, sq / denom, ab / denom, val_mse, val_mae, config.lr,
                              time.perf_counter() - t0, phase)
            log.append(rec)
            logger.info("epoch %d [%s] train_mse=%.6g val_mse=%.6g", epoch, phase, rec.train_mse, val_mse)
            if not np.isfinite(rec.train_mse):
                raise TrainingDiverged(f"non-finite training error at epoch {epoch}", model=best_model)
            score = val_mse if len(va) else rec.train_mse
            if score < best_val:
                best_val, best_model = score, current
            if score < phase_best:
                phase_best, stale = score, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return best_model, log


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lr_grid"] = list(cfg.lr_grid)
    return d


__all__ = [
    "EpochRecord", "GradCheck", "LR_GRID", "MODES", "TrainConfig", "WindowSet", "adam_step", "epoch_log_csv",
    "evaluate", "gradient_check", "leads_for", "loss_and_grads", "mae", "make_windows", "mse", "predict",
    "train", "trainable_names", "write_epoch_log",
]
