from .config import ConfigError, RunConfig
from .loss import class_weights, smooth_targets, weighted_bce
from .mix import mix_batch
from .optim import AdamW, EarlyStopping, clip_global_norm, ema_update, global_norm, lr_at
from .trainer import Trainer, TrainingError, TrainState, derive_rng, write_history
