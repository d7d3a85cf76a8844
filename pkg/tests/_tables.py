"""Published layer output sizes (height x width x channels) for the standard model.

Each entry pairs a traced layer name with its table row; ``crop1`` carries the
36x43 row that the crop parameters alone would not produce.
"""

MAIN_STAGE = [
    ("main.stem_conv", (106, 128, 64)),
    ("main.pool", (35, 42, 64)),
    ("main.enc1", (35, 42, 256)),
    ("main.enc2", (18, 21, 512)),
    ("main.enc3", (9, 11, 1024)),
    ("main.dec1", (9, 11, 256)),
    ("main.dec2", (18, 22, 128)),
    ("main.dec3", (36, 44, 64)),
    ("main.crop1", (36, 43, 64)),
    ("main.up", (108, 129, 64)),
    ("main.deconv", (216, 258, 64)),
    ("main.crop2", (212, 256, 64)),
    ("main.head_conv", (212, 256, 1)),
    ("main.sigmoid", (212, 256, 1)),
]

REFINEMENT_STAGE = [
    ("refine.stem_conv", (106, 128, 64)),
    ("refine.pool", (35, 42, 64)),
    ("refine.enc1", (35, 42, 256)),
    ("refine.enc2", (18, 21, 512)),
    ("refine.dec1", (36, 42, 128)),
    ("refine.dec2", (72, 84, 64)),
    ("refine.pad", (72, 86, 64)),
    ("refine.up", (216, 258, 64)),
    ("refine.crop", (212, 256, 64)),
    ("refine.head_conv", (212, 256, 1)),
    ("refine.sigmoid", (212, 256, 1)),
]


def trace_standard_model(model):
    import numpy as np

    from dpdnet.layers import trace_shapes
    from dpdnet.tensor import Tensor, no_grad

    with no_grad(), trace_shapes() as trace:
        main, refined = model(Tensor(np.zeros((1, 212, 256, 1), dtype=np.float32)))
    return dict(trace), main.shape, refined.shape
