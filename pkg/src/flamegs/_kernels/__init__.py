"""Hot-loop kernels: compiled Cython core with a NumPy fallback.

The compiled extension is preferred when present; set FLAMEGS_PURE_PYTHON=1
to force the fallback. Both backends implement identical math with identical
per-pixel operation order, so results agree to floating-point noise and each
backend is deterministic on its own.
"""

import importlib
import os

from . import fallback as _fallback

_core = None
if os.environ.get("FLAMEGS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        _core = importlib.import_module("._core", __name__)
    except ImportError:
        _core = None

if _core is not None:
    BACKEND = "compiled"
    rasterize_forward = _core.rasterize_forward
    rasterize_backward = _core.rasterize_backward
    traverse_rays = _core.traverse_rays
    carve_rays = _core.carve_rays
    art_sweep = _core.art_sweep
else:
    BACKEND = "python"
    rasterize_forward = _fallback.rasterize_forward
    rasterize_backward = _fallback.rasterize_backward
    traverse_rays = _fallback.traverse_rays
    carve_rays = _fallback.carve_rays
    art_sweep = _fallback.art_sweep

# Always-importable handles, used by the backend-equivalence tests and the
# kernel benchmark.
python_backend = _fallback
compiled_backend = _core
