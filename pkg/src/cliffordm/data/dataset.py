"""In-memory image sets built from a manifest and a patient split."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .cmt import cmt_read
from .manifest import ExpandedSample, SampleRecord, expand_eyes, label_matrix, parse_manifest, resolve
from .split import patient_split, split_map


@dataclass
class ImageSet:
    """Source images (``N x H x W x 3`` uint8) with their label matrix."""

    images: np.ndarray
    labels: np.ndarray
    patient_ids: List[str]

    def __len__(self) -> int:
        return len(self.images)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".cmt":
        arr = cmt_read(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{path}: expected an H x W x 3 image, got {arr.shape}")
    return arr


def load_set(samples: Sequence[ExpandedSample], root) -> ImageSet:
    if not samples:
        raise ValueError("empty split")
    imgs = [load_image(resolve(s.path, root)) for s in samples]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ValueError(f"images must share one size, found {sorted(shapes)[:3]}")
    return ImageSet(np.stack(imgs), label_matrix(samples), [s.patient_id for s in samples])


def load_splits(manifest, ratio: float = 0.8, seed: int = 0, records: Optional[List[SampleRecord]] = None):
    """Parse, split by patient, expand eyes and load both splits."""
    records = parse_manifest(manifest) if records is None else records
    train_ids, val_ids = patient_split(records, ratio, seed)
    samples = expand_eyes(records, split_map(train_ids, val_ids))
    root = Path(manifest).parent
    train = load_set([s for s in samples if s.split == "train"], root)
    val = load_set([s for s in samples if s.split == "val"], root)
    return train, val
