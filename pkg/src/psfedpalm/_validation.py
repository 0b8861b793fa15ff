"""Input validation helpers shared by the estimator and the CLI."""
import numpy as np
from sklearn.utils.validation import check_array

from .specdata import IMAGE_SIZE, SpectrumBand


def check_images(X, size=IMAGE_SIZE):
    """Return a float64 (N, size, size) stack from images or flattened rows."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim == 2 and X.shape[1] == size * size:
        X = X.reshape(-1, size, size)
    if X.ndim != 3 or X.shape[1:] != (size, size):
        raise ValueError(f"expected images of shape (n, {size}, {size}) or (n, {size * size}), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return X


def check_bands(bands, n_samples):
    """Canonical band names (``"NIR"``, ``"Red"``, ...) as a string array."""
    if bands is None:
        raise ValueError("a spectrum band is required for every sample")
    if isinstance(bands, (str, SpectrumBand)):
        bands = [bands] * n_samples
    parsed = np.array([SpectrumBand.parse(b).value for b in bands])
    if len(parsed) != n_samples:
        raise ValueError(f"got {len(parsed)} band labels for {n_samples} samples")
    return parsed
