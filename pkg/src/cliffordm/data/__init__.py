from .augment import AugmentConfig, augment_train, preprocess_eval
from .cmt import CMTError, cmt_read, cmt_write
from .dataset import ImageSet, load_image, load_set, load_splits
from .manifest import (
    LABEL_NAMES,
    ExpandedSample,
    ManifestError,
    SampleRecord,
    expand_eyes,
    parse_manifest,
    write_manifest,
)
from .split import patient_split, split_map
from .synth import SynthSpec, synth_generate, synth_records
