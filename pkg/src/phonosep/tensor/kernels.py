"""Backend selection for the convolution hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``PHONOSEP_KERNELS=python`` to force the fallback.
"""
import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

BACKEND = "python"
im2col = _fallback.im2col
col2im = _fallback.col2im

if os.environ.get("PHONOSEP_KERNELS", "auto") != "python":
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        logger.debug("compiled kernels unavailable, using numpy fallback")
    else:
        BACKEND = "compiled"
        im2col = _kernels.im2col
        col2im = _kernels.col2im
