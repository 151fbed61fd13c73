"""SSIM over fully-interior Gaussian windows, with an analytic gradient.

Local statistics use an 11x11 separable Gaussian window (sigma 1.5,
truncated at radius 5, normalized to unit sum) and population covariances.
Only windows that fit entirely inside the image contribute, which matches
the usual reference implementations that filter with padding and then crop
the border before averaging.

Constants are for unit dynamic range: C1 = 0.01^2, C2 = 0.03^2.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

WINDOW_RADIUS = 5
WINDOW_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _window():
    t = np.arange(-WINDOW_RADIUS, WINDOW_RADIUS + 1, dtype=np.float64)
    w = np.exp(-0.5 * (t / WINDOW_SIGMA) ** 2)
    return w / w.sum()


_W1D = _window()


def _filter_valid(img):
    """Separable windowed mean on fully-interior positions: (H-10, W-10)."""
    tmp = convolve1d(img, _W1D, axis=0, mode="constant")
    tmp = convolve1d(tmp, _W1D, axis=1, mode="constant")
    r = WINDOW_RADIUS
    return tmp[r:-r, r:-r]


def _spread_full(arr, height, width):
    """Adjoint of _filter_valid: place the valid grid back on the image grid."""
    r = WINDOW_RADIUS
    full = np.zeros((height, width), dtype=np.float64)
    full[r : height - r, r : width - r] = arr
    full = convolve1d(full, _W1D, axis=0, mode="constant")
    full = convolve1d(full, _W1D, axis=1, mode="constant")
    return full


def _local_stats(x, y):
    mu_x = _filter_valid(x)
    mu_y = _filter_valid(y)
    xx = _filter_valid(x * x)
    yy = _filter_valid(y * y)
    xy = _filter_valid(x * y)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def ssim_map(x, y):
    """Per-window SSIM on the interior grid; inputs must be equally sized and
    at least 11x11."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 2 * WINDOW_RADIUS + 1:
        raise ValueError("image smaller than the SSIM window")
    mu_x, mu_y, var_x, var_y, cov = _local_stats(x, y)
    a1 = 2 * mu_x * mu_y + C1
    a2 = 2 * cov + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = var_x + var_y + C2
    return (a1 * a2) / (b1 * b2)


def ssim(x, y) -> float:
    """Mean SSIM over interior windows."""
    return float(ssim_map(x, y).mean())


def ssim_with_gradient(x, y):
    """Mean SSIM and its gradient wrt the first image.

    The gradient routes each window's partials back through the windowed
    means of x, x^2 and x*y (the adjoint of the valid-mode filtering).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    h, w = x.shape
    mu_x, mu_y, var_x, var_y, cov = _local_stats(x, y)
    a1 = 2 * mu_x * mu_y + C1
    a2 = 2 * cov + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = var_x + var_y + C2
    s_map = (a1 * a2) / (b1 * b2)
    n = s_map.size

    # partials wrt the filtered fields mu_x, E[x^2], E[xy]
    d_mu = (2 * mu_y * (a2 - a1)) / (b1 * b2) - s_map * (2 * mu_x / b1 - 2 * mu_x / b2)
    d_xx = -s_map / b2
    d_xy = 2 * a1 / (b1 * b2)

    grad = (_spread_full(d_mu, h, w)
            + 2.0 * x * _spread_full(d_xx, h, w)
            + y * _spread_full(d_xy, h, w)) / n
    return float(s_map.mean()), grad
