"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tensor


DENOM_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, DENOM_FLOOR) over the checked entries.

    The floor keeps structurally zero gradients (a bias feeding batch norm)
    from turning finite-difference round-off into a relative error of 1.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), DENOM_FLOOR)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f: Callable[[], float], t: Tensor, indices: Sequence[tuple], h: float = 1e-6) -> np.ndarray:
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = f()
        t.data[idx] = orig - h
        fm = f()
        t.data[idx] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    n_entries: int | None = None,
    h: float = 1e-6,
    seed: int = 0,
) -> list[float]:
    """Compare backprop against central differences for every tensor.

    ``loss_fn`` must rebuild the graph and return a scalar tensor; it has to
    be a pure function of the tensors' data (freeze stateful layers first).
    With ``n_entries`` set, only that many random entries per tensor are
    probed. Returns one relative error per tensor.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f() -> float:
        return float(loss_fn().data)

    errors = []
    for t, a in zip(tensors, analytic):
        flat = [np.unravel_index(i, t.shape) for i in range(t.size)]
        if n_entries is not None and t.size > n_entries:
            pick = rng.choice(t.size, size=n_entries, replace=False)
            flat = [flat[i] for i in pick]
        num = numeric_grad(f, t, flat, h)
        ana = np.array([a[idx] for idx in flat])
        errors.append(relative_error(ana, num))
    return errors
