"""Size of a flow field: root-mean neighbour differences (TV) and magnitudes (L2).

Both use ``n`` = number of pixels. The TV metric uses the same 4-connected,
both-directions neighbourhood as :func:`stadv.losses.flow_loss`.
"""

import numpy as np

__all__ = ["flow_tv_metric", "flow_l2_metric", "neighbour_sq_sum", "mean_std"]


def _as_flow(f):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {f.shape}")
    return f


def neighbour_sq_sum(f):
    """Sum over ordered 4-neighbour pairs of |f_p - f_q|^2."""
    f = _as_flow(f)
    vert = np.sum((f[1:] - f[:-1]) ** 2)
    horiz = np.sum((f[:, 1:] - f[:, :-1]) ** 2)
    return 2.0 * float(vert + horiz)


def flow_tv_metric(f):
    f = _as_flow(f)
    n = f.shape[0] * f.shape[1]
    return float(np.sqrt(neighbour_sq_sum(f) / n))


def flow_l2_metric(f):
    f = _as_flow(f)
    n = f.shape[0] * f.shape[1]
    return float(np.sqrt(np.sum(f**2) / n))


def mean_std(values):
    """Mean and population standard deviation; (0, 0) for an empty input."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return 0.0, 0.0
    return float(v.mean()), float(v.std())
