"""NumPy/SciPy implementations of the surface-distance kernels.

Same contract as the compiled ``_kernels`` module; used when the extension
is not built or ``SEGGUIDED_PURE_PYTHON=1`` is set.
"""

import numpy as np
from scipy import ndimage


def surface(mask):
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    # out-of-volume neighbours are background, so boundary voxels are surface
    interior = mask.copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return (mask & ~interior).astype(np.uint8)


def squared_edt(features, spacing):
    features = np.asarray(features, dtype=bool)
    if not features.any():
        return np.full(features.shape, np.inf)
    dist = ndimage.distance_transform_edt(~features, sampling=spacing)
    return dist * dist
