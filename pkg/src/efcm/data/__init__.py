from .augment import OP_ORDER, PARAM_SETS, AugmentSpec, augment, sample_params
from .preprocess import channel_means, preprocess, preprocess_batch, resize
from .synth import (
    PatchDataConfig,
    PatchDataset,
    SlideDataConfig,
    SlideDataset,
    SyntheticSlide,
    generate_patches,
    generate_slides,
    load_dataset,
    load_patch_dataset,
    load_slide_dataset,
    render_slide,
    synth_generate,
)
from .tissue import Patch, extract_patches, tissue_segment
