"""Patient-level stratified train/validation split."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .manifest import SampleRecord

log = logging.getLogger(__name__)


def patient_labels(records: Sequence[SampleRecord]) -> Dict[str, np.ndarray]:
    """Element-wise max of the label vectors of each patient's records."""
    agg: Dict[str, np.ndarray] = {}
    for r in records:
        lab = np.asarray(r.labels, dtype=np.int64)
        agg[r.patient_id] = np.maximum(agg[r.patient_id], lab) if r.patient_id in agg else lab
    return agg


def stratum_key(labels: np.ndarray) -> int:
    # np.argmax resolves ties (including all-zero vectors) to the lowest index
    return int(np.argmax(labels))


def patient_split(records: Sequence[SampleRecord], ratio: float = 0.8, seed: int = 0) -> Tuple[List[str], List[str]]:
    """Split patients ~``ratio : 1 - ratio`` within each argmax stratum.

    Within a stratum of ``n`` patients (sorted by id, then shuffled with the
    seeded generator) the first ``round(ratio * n)`` go to train. A stratum
    holding a single patient goes to train. The result does not depend on
    record order.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    agg = patient_labels(records)
    if len(agg) < 2:
        raise ValueError("need at least two patients to split")
    strata: Dict[int, List[str]] = defaultdict(list)
    for pid in sorted(agg):
        strata[stratum_key(agg[pid])].append(pid)

    rng = np.random.default_rng(seed)
    train, val = [], []
    for key in sorted(strata):
        ids = strata[key]
        if len(ids) == 1:
            log.warning("stratum %d has a single patient (%s); assigned to train", key, ids[0])
            train.extend(ids)
            continue
        order = rng.permutation(len(ids))
        n_train = min(len(ids), int(math.floor(ratio * len(ids) + 0.5)))
        train.extend(ids[i] for i in order[:n_train])
        val.extend(ids[i] for i in order[n_train:])
    return sorted(train), sorted(val)


def split_map(train_ids, val_ids) -> Dict[str, str]:
    m = {pid: "train" for pid in train_ids}
    m.update({pid: "val" for pid in val_ids})
    return m
