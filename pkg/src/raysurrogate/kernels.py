"""Backend selection for the tracing kernels.

The compiled extension is used when importable; set ``RAYSURROGATE_PURE=1``
to force the numpy fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import kernels_py

BACKEND = "python"
_impl = kernels_py

if os.environ.get("RAYSURROGATE_PURE", "") not in ("1", "true", "yes"):
    try:
        from ._ext import ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = kernels_py


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def first_hits(origins, dirs, axes, planes, tmin=1e-9, backend=None):
    impl = kernels_py if backend == "python" else _impl
    origins = np.atleast_2d(_f64(origins))
    dirs = np.atleast_2d(_f64(dirs))
    return impl.first_hits(origins, dirs, np.ascontiguousarray(axes, dtype=np.int64), _f64(planes), float(tmin))


def segment_point_distances(starts, ends, p, backend=None):
    impl = kernels_py if backend == "python" else _impl
    return impl.segment_point_distances(np.atleast_2d(_f64(starts)), np.atleast_2d(_f64(ends)), _f64(p))
