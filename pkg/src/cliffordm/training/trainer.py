"""Training loop: accumulation, clipping, AdamW, EMA, validation, early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..autodiff.tensor import NumericError, Tensor
from ..backbone import CliffordM, build_model, save_checkpoint
from ..data.augment import AugmentConfig, augment_train, preprocess_eval
from ..data.dataset import ImageSet
from ..layers import BatchNorm2d
from ..metrics import MetricsReport, evaluate
from .config import RunConfig
from .loss import class_weights, smooth_targets, weighted_bce
from .mix import mix_batch
from .optim import AdamW, EarlyStopping, clip_global_norm, ema_update, lr_at

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "step", "lr", "train_loss", "val_macro_auc", "val_macro_f1opt", "val_macro_f1_05", "mix")


class TrainingError(RuntimeError):
    pass


def derive_rng(seed: int, label: str, *ints: int) -> np.random.Generator:
    """Independent generator for a named subsystem and integer coordinates."""
    return np.random.default_rng([seed, zlib.crc32(label.encode()), *ints])


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_auc: float = -math.inf
    best_epoch: int = -1
    since_improvement: int = 0
    skipped_steps: int = 0
    history: List[dict] = field(default_factory=list)


class Trainer:
    """Owns the model, optimizer state and EMA shadow for one run.

    Validation scores the EMA weights. ``freeze_bn`` keeps batch-norm layers in
    eval mode during training steps.
    """

    def __init__(self, cfg: RunConfig, model: Optional[CliffordM] = None, dtype=np.float32,
                 freeze_bn: bool = False):
        self.cfg = cfg
        self.model = model if model is not None else build_model(cfg.model_config(), cfg.seed, dtype)
        self.dtype = self.model.dtype
        self.freeze_bn = freeze_bn
        self.params = dict(self.model.named_parameters())
        self.opt = AdamW(self.params, weight_decay=cfg.weight_decay)
        self.ema = {k: v.copy() for k, v in self.model.state_dict().items()}
        self._eval_model: Optional[CliffordM] = None
        self.best_state: Optional[Dict[str, np.ndarray]] = None
        self.state = TrainState()
        self.weights = np.ones(cfg.num_classes)
        self.total_steps = 1
        self.warmup_steps = 0
        self._pending = 0
        self._nonfinite = 0

    # -- single steps --------------------------------------------------
    def _set_train_mode(self):
        self.model.train()
        if self.freeze_bn:
            for _, mod in _modules(self.model):
                if isinstance(mod, BatchNorm2d):
                    mod.eval()

    def accumulate(self, images: np.ndarray, targets: np.ndarray, rng=None) -> float:
        """Forward/backward one micro-batch, adding ``grad / accum_steps``."""
        self._set_train_mode()
        try:
            logits = self.model(Tensor(images.astype(self.dtype, copy=False)), rng)
            loss = weighted_bce(logits, smooth_targets(targets, self.cfg.smoothing), self.weights)
            value = float(loss.data)
        except NumericError:
            value = float("nan")
        if not math.isfinite(value):
            self._nonfinite += 1
            if self._nonfinite >= 2:
                raise TrainingError("loss was non-finite twice in a row")
            return value
        self._nonfinite = 0
        (loss * (1.0 / self.cfg.accum_steps)).backward()
        self._pending += 1
        return value

    def optimizer_step(self) -> float:
        """Clip, AdamW update at the scheduled learning rate, EMA update."""
        lr = lr_at(self.state.step, self.total_steps, self.warmup_steps, self.cfg.lr)
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        if all(np.isfinite(g).all() for g in grads):
            clip_global_norm(grads, self.cfg.grad_clip)
        if self.opt.step(lr):
            ema_update(self.ema, self.model.state_dict(), self.cfg.ema_decay)
        else:
            self.state.skipped_steps += 1
        self.model.zero_grad()
        self._pending = 0
        self.state.step += 1
        return lr

    def train_step(self, micro_batches: Sequence[Tuple[np.ndarray, np.ndarray]], rng=None) -> float:
        """Accumulate over ``micro_batches`` then take one optimizer step."""
        for x, y in micro_batches:
            self.accumulate(x, y, rng)
        return self.optimizer_step()

    # -- evaluation ----------------------------------------------------
    def ema_model(self) -> CliffordM:
        if self._eval_model is None:
            self._eval_model = build_model(self.model.cfg, 0, self.dtype)
        self._eval_model.load_state_dict(self.ema)
        return self._eval_model

    def best_model(self) -> CliffordM:
        """Model holding the EMA weights of the best validation epoch."""
        model = build_model(self.model.cfg, 0, self.dtype)
        model.load_state_dict(self.best_state if self.best_state is not None else self.ema)
        return model

    def predict_scores(self, images: np.ndarray, use_ema: bool = True) -> np.ndarray:
        model = self.ema_model() if use_ema else self.model
        logits = model.predict_logits(images)
        return 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))

    # -- full run ------------------------------------------------------
    def fit(self, train: ImageSet, val: ImageSet, out_dir=None,
            on_epoch: Optional[Callable[[dict], None]] = None, meta: Optional[Dict[str, str]] = None) -> List[dict]:
        """Run the protocol; ``meta`` is copied into every checkpoint's metadata."""
        cfg = self.cfg
        if len(train) == 0 or len(val) == 0:
            raise TrainingError("empty train or validation split")
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        self.weights = class_weights(train.labels, cfg.weight_cap)
        batches_per_epoch = len(train) // cfg.batch_size
        if batches_per_epoch == 0:
            raise TrainingError(f"train split of {len(train)} images smaller than one batch")
        steps_per_epoch = math.ceil(batches_per_epoch / cfg.accum_steps)
        self.total_steps = steps_per_epoch * cfg.epochs
        self.warmup_steps = steps_per_epoch * cfg.warmup_epochs
        aug = AugmentConfig(size=cfg.input_size)
        val_x = np.stack([preprocess_eval(im, cfg.input_size) for im in val.images])
        stopper = EarlyStopping(cfg.patience)
        log.info("run: %d train / %d val images, %d steps/epoch, params=%d",
                 len(train), len(val), steps_per_epoch, self.model.num_parameters())

        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            self.state.epoch = epoch
            order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(train))
            losses, tags = [], {"mixup": 0, "cutmix": 0, "none": 0}
            for b in range(batches_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                x = np.stack([augment_train(train.images[i], derive_rng(cfg.seed, "augment", epoch, int(i)), aug)
                              for i in idx])
                y = train.labels[idx].astype(np.float64)
                if cfg.mix_enabled:
                    x, y, tag = mix_batch(x, y, derive_rng(cfg.seed, "mix", epoch, b),
                                          cfg.mixup_alpha, cfg.cutmix_alpha)
                    tags[tag] += 1
                losses.append(self.accumulate(x, y, derive_rng(cfg.seed, "drop", epoch, b)))
                if self._pending == cfg.accum_steps:
                    lr = self.optimizer_step()
            if self._pending:
                lr = self.optimizer_step()

            report = evaluate(self.predict_scores(val_x), val.labels)
            auc = report.macro_auc if report.macro_auc is not None else float("nan")
            stop = stopper.update(auc, epoch)
            improved = stopper.best_epoch == epoch
            self.state.best_auc, self.state.best_epoch = stopper.best, stopper.best_epoch
            self.state.since_improvement = stopper.since
            if improved:
                self.best_state = {k: v.copy() for k, v in self.ema.items()}
            row = {
                "epoch": epoch + 1,
                "step": self.state.step,
                "lr": f"{lr:.6e}",
                "train_loss": f"{float(np.mean(losses)):.6f}",
                "val_macro_auc": f"{auc:.6f}",
                "val_macro_f1opt": f"{report.macro_f1opt:.6f}",
                "val_macro_f1_05": f"{report.macro_f1_at_05:.6f}",
                "mix": f"{tags['mixup']}/{tags['cutmix']}",
            }
            self.state.history.append(row)
            log.info("epoch %d  loss %s  val auc %s  f1opt %s  (%.1fs)", epoch + 1, row["train_loss"],
                     row["val_macro_auc"], row["val_macro_f1opt"], time.perf_counter() - t0)
            if out is not None:
                write_history(out / "history.csv", self.state.history)
                info = {"seed": str(cfg.seed), **(meta or {}), "epoch": str(epoch + 1),
                        "val_macro_auc": row["val_macro_auc"], "weights": "ema"}
                save_checkpoint(out / "last.ckpt", self.model, info, state=self.ema)
                if improved:
                    save_checkpoint(out / "best.ckpt", self.model, info, state=self.ema)
            if on_epoch is not None:
                on_epoch(row)
            if stop:
                log.info("early stop: no improvement for %d epochs (best epoch %d)", cfg.patience,
                         stopper.best_epoch + 1)
                break
        return self.state.history

    def evaluate(self, images: ImageSet) -> MetricsReport:
        x = np.stack([preprocess_eval(im, self.cfg.input_size) for im in images.images])
        return evaluate(self.predict_scores(x), images.labels)


def write_history(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _modules(mod, prefix=""):
    yield prefix, mod
    for name, child in mod.children():
        yield from _modules(child, prefix + name + ".")
