"""Sequential hot loops: GAE recursion, per-segment V^ex, Adam and the auxiliary losses.

The compiled extension is used when it was built; otherwise the pure-Python
twin is imported. Set ``MERL_RL_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("MERL_RL_PURE_PYTHON") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def _prep(rewards, values, next_values, terminals, ends):
    return (
        np.ascontiguousarray(rewards, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(next_values, dtype=np.float64),
        np.ascontiguousarray(terminals, dtype=np.uint8),
        np.ascontiguousarray(ends, dtype=np.uint8),
    )


def gae(rewards, values, next_values, terminals, ends, gamma, lam, impl=None):
    """Backward GAE recursion; ``ends[t]`` cuts the recursion after step t.

    ``next_values[t]`` is the bootstrap for step t and is ignored where
    ``terminals[t]`` is set.
    """
    impl = impl or _impl
    return impl.gae(*_prep(rewards, values, next_values, terminals, ends), float(gamma), float(lam))


def segment_vex(returns, values, starts, ends, tol=1e-8, impl=None):
    """V^ex for each inclusive ``[start, end]`` range; returns ``(vex, valid)``."""
    impl = impl or _impl
    vex, valid = impl.segment_vex(
        np.ascontiguousarray(returns, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(starts, dtype=np.int64),
        np.ascontiguousarray(ends, dtype=np.int64),
        float(tol),
    )
    return vex, valid.astype(bool)


def available_backends():
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


def adam(p, g, m, v, lr, b1, b2, eps, step, impl=None):
    """Fused bias-corrected Adam on flat float64 buffers; ``step`` is the new count.

    Returns fresh ``(params, first_moment, second_moment)`` arrays.
    """
    impl = impl or _impl
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    return impl.adam(p, g, m, v, float(lr), float(b1), float(b2), float(eps), c1, c2)


def aux_losses(out, idx, vex, vex_valid, unit, fs_valid, c_ve, c_fs, ve_col, fs_col, eps, impl=None):
    """VE and FS losses over the minibatch rows ``idx`` plus the gradient of
    ``c_ve * L_VE + c_fs * L_FS`` w.r.t. the stacked head output ``out``.

    ``ve_col`` / ``fs_col`` locate each head's columns in ``out``; -1 means absent.
    """
    impl = impl or _impl
    return impl.aux_losses(
        np.ascontiguousarray(out, dtype=np.float64),
        np.ascontiguousarray(idx, dtype=np.int64),
        np.ascontiguousarray(vex, dtype=np.float64),
        np.ascontiguousarray(vex_valid).view(np.uint8),
        np.ascontiguousarray(unit, dtype=np.float64),
        np.ascontiguousarray(fs_valid).view(np.uint8),
        float(c_ve), float(c_fs), int(ve_col), int(fs_col), float(eps),
    )
