"""Joint regression/classification loss and the early-stopping training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .augment import augment_batch
from .pool import AppliancePool, ScalingConfig
from .windows import StatusRule, WindowDataset

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
GRAD_CLIP = 10.0


class TrainingDiverged(RuntimeError):
    pass


def compute_loss(y, y_c, power, on_prob):
    """Sum over appliances of MSE(y, power * on_prob) + BCE(y_c, on_prob).

    Inputs are ``(B, n, L)`` (or ``(n, L)``) tensors. Returns ``(total,
    output_terms, on_terms)`` with the per-appliance terms shaped ``(n,)``.
    """
    if not (y.shape == y_c.shape == power.shape == on_prob.shape):
        raise ValueError(f"shape mismatch: {tuple(y.shape)}, {tuple(y_c.shape)}, "
                         f"{tuple(power.shape)}, {tuple(on_prob.shape)}")
    dims = [d for d in range(y.dim()) if d != y.dim() - 2]
    out_terms = ((y - power * on_prob) ** 2).mean(dim=dims)
    p = on_prob.clamp(PROB_EPS, 1 - PROB_EPS)
    bce = -(y_c * torch.log(p) + (1 - y_c) * torch.log(1 - p))
    on_terms = bce.mean(dim=dims)
    return (out_terms + on_terms).sum(), out_terms, on_terms


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 32
    sa_enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1 or not self.learning_rate > 0 or self.batch_size < 1:
            raise ValueError("invalid training configuration")


@dataclass
class TrainState:
    best_loss: float = math.inf
    stall: int = 0
    epoch: int = 0
    best_epoch: int = 0
    stopped: bool = False


class EarlyStopping:
    """Patience counter: improvement resets it, ``patience`` stalls stop."""

    def __init__(self, patience: int, state: Optional[TrainState] = None):
        self.patience = patience
        self.state = state or TrainState()

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when ``val_loss`` is a new best."""
        s = self.state
        s.epoch = epoch
        if val_loss < s.best_loss:
            s.best_loss = val_loss
            s.best_epoch = epoch
            s.stall = 0
            return True
        s.stall += 1
        if s.stall >= self.patience:
            s.stopped = True
        return False


@dataclass
class Augmentation:
    """What training-time augmentation needs besides the batch itself."""

    pool: AppliancePool
    scaling: ScalingConfig
    rule: StatusRule
    targets: Sequence[str]
    distractors: Sequence[str] = ()


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: List[Dict[str, float]]
    state: TrainState
    final_state: Dict[str, torch.Tensor]
    optimizer: torch.optim.Optimizer
    best_state: Dict[str, torch.Tensor] = field(default_factory=dict)


def _stack(samples, dtype):
    x = torch.as_tensor(np.stack([s.x for s in samples]), dtype=dtype)
    y = torch.as_tensor(np.stack([s.y for s in samples]), dtype=dtype)
    y_c = torch.as_tensor(np.stack([s.y_c for s in samples]), dtype=dtype)
    return x, y, y_c


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def model_dtype(model: torch.nn.Module):
    return next(model.parameters()).dtype


@torch.no_grad()
def predict(model: torch.nn.Module, data: WindowDataset, batch_size: int = 256):
    """Run the model over every window; returns numpy ``(power, on_prob, y_hat)``."""
    model.eval()
    dtype = model_dtype(model)
    parts = []
    for i in range(0, len(data), batch_size):
        x = torch.tensor(data.x[i : i + batch_size], dtype=dtype)
        parts.append(model(x))
    return tuple(torch.cat(p).numpy() for p in zip(*parts))


@torch.no_grad()
def evaluate_loss(model, data: WindowDataset, batch_size: int = 256):
    """Mean loss over windows (each window weighted equally)."""
    model.eval()
    dtype = model_dtype(model)
    total, out_sum, on_sum, n = 0.0, 0.0, 0.0, 0
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        x = torch.tensor(data.x[sl], dtype=dtype)
        y = torch.tensor(data.y[sl], dtype=dtype)
        y_c = torch.tensor(data.y_c[sl], dtype=dtype)
        o = model(x)
        b = x.shape[0]
        t, lo, ln = compute_loss(y, y_c, o.power, o.on_prob)
        total += float(t) * b
        out_sum = out_sum + lo.numpy() * b
        on_sum = on_sum + ln.numpy() * b
        n += b
    return total / n, out_sum / n, on_sum / n


def train(
    model: torch.nn.Module,
    train_set: WindowDataset,
    val_set: WindowDataset,
    cfg: TrainConfig,
    augmentation: Optional[Augmentation] = None,
    appliance_names: Optional[Sequence[str]] = None,
    resume: Optional[dict] = None,
    val_loss_fn: Optional[Callable[[torch.nn.Module, int], float]] = None,
    on_epoch: Optional[Callable[[int, torch.nn.Module, dict], None]] = None,
) -> TrainResult:
    """Adam training with optional per-batch augmentation and early stopping.

    Returns the weights that achieved the best validation loss. Shuffling and
    augmentation draw from streams keyed on ``(seed, epoch, batch)``, so a run
    resumed from ``resume`` (a dict with ``train_state``, ``optimizer_state``,
    ``best_state`` and ``history``) continues exactly like an uninterrupted one.
    ``val_loss_fn`` replaces the validation loss (used for scripted tests).
    """
    if cfg.sa_enabled and (augmentation is None or len(augmentation.pool) == 0):
        raise ValueError("sample augmentation enabled but the pool is empty")
    names = list(appliance_names or train_set.spec.appliance_order)
    dtype = model_dtype(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    state = TrainState()
    history: List[Dict[str, float]] = []
    best = copy.deepcopy(model.state_dict())
    if resume is not None:
        state = TrainState(**resume["train_state"])
        if resume.get("optimizer_state") is not None:
            optimizer.load_state_dict(resume["optimizer_state"])
        if resume.get("best_state") is not None:
            best = copy.deepcopy(resume["best_state"])
        history = list(resume.get("history", []))
    stopper = EarlyStopping(cfg.patience, state)

    n = len(train_set)
    for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
        if state.stopped:
            break
        model.train()
        order = _rng(cfg.seed, epoch, 0).permutation(n)
        losses, weights = [], []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = train_set.samples(order[start : start + cfg.batch_size])
            if cfg.sa_enabled:
                a = augmentation
                batch = augment_batch(
                    batch, a.pool, a.scaling, a.rule, _rng(cfg.seed, epoch, b + 1),
                    targets=a.targets, distractors=a.distractors, norm_constant=train_set.norm_constant,
                )
            x, y, y_c = _stack(batch, dtype)
            out = model(x)
            loss, _, _ = compute_loss(y, y_c, out.power, out.on_prob)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {b}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
            optimizer.step()
            losses.append(loss.item())
            weights.append(len(batch))

        train_loss = float(np.average(losses, weights=weights))
        row = {"epoch": epoch, "train_loss": train_loss}
        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(model, epoch))
        else:
            val_loss, lo, ln = evaluate_loss(model, val_set)
            for i, a in enumerate(names):
                row[f"val_output_{a}"] = float(lo[i])
                row[f"val_on_{a}"] = float(ln[i])
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        row["val_loss"] = val_loss
        history.append(row)
        if stopper.update(epoch, val_loss):
            best = copy.deepcopy(model.state_dict())
        log.info("epoch %d train %.6f val %.6f stall %d", epoch, train_loss, val_loss, state.stall)
        if on_epoch is not None:
            on_epoch(epoch, model, row)

    final_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best)
    return TrainResult(model, history, state, final_state, optimizer, best)


def resume_payload(result: TrainResult) -> dict:
    return {
        "train_state": asdict(result.state),
        "optimizer_state": result.optimizer.state_dict(),
        "best_state": result.best_state,
        "history": result.history,
    }


HISTORY_PRECISION = "{:.6f}"


def write_history(history: List[Dict[str, float]], path: str) -> None:
    if not history:
        raise ValueError("empty history")
    keys = list(history[0])
    keys = ["epoch", "train_loss", "val_loss"] + [k for k in keys if k not in ("epoch", "train_loss", "val_loss")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in history:
            w.writerow([row["epoch"]] + [HISTORY_PRECISION.format(row[k]) for k in keys[1:]])


def read_history(path: str) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
