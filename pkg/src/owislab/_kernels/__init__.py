"""Hot numerical kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when it was built; set the environment
variable ``OWISLAB_FORCE_NUMPY=1`` to force the fallback (used by the
benchmark and the backend-parity tests).
"""

import os

from ._numpy import sigmoid  # elementwise numpy is already fast enough

if os.environ.get("OWISLAB_FORCE_NUMPY"):
    from . import _numpy as _impl
else:
    try:
        from . import _ext as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _numpy as _impl

BACKEND = _impl.BACKEND
bce_grads = _impl.bce_grads
dice_grads = _impl.dice_grads
bce_dice_values = _impl.bce_dice_values
soft_union = _impl.soft_union
iou_pairs = _impl.iou_pairs

__all__ = [
    "BACKEND",
    "sigmoid",
    "bce_grads",
    "dice_grads",
    "bce_dice_values",
    "soft_union",
    "iou_pairs",
]
