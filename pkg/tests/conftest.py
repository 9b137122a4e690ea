import os
import sys

import torch
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")
torch.set_num_threads(1)

# A pipeline small enough to train in seconds: 64x64 frames, 32x32 patches.
SMALL_PIPELINE = {
    "seed": 3,
    "simulate": {"n_frames": 24, "scene": {"width": 64, "height": 64, "n_vessels": 3, "min_bubbles": 1,
                                           "max_bubbles": 6, "density": 3.0}},
    "split": {"test_size": 4, "threshold": 0.5},
    "detector": {"input_size": [32, 32], "d_model": 16, "heads": 2, "points": 2, "levels": 2,
                 "encoder_layers": 1, "decoder_layers": 1, "queries": 8, "ffn_dim": 16,
                 "stride_exponent": 2, "backbone_channels": [4, 8], "norm_groups": 2},
    "train": {"epochs": 2, "batch_size": 4},
    "render": {"factor": 4},
}
