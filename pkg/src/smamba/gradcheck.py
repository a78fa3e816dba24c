"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tensor, backward, default_dtype, no_grad


def numeric_grad(forward: Callable[[], Tensor], param: Tensor, eps: float = 1e-4, coords=None) -> np.ndarray:
    """Central differences of ``forward()`` wrt ``param`` at ``coords`` (all by default)."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    with no_grad():
        for i in indices:
            old = flat[i]
            flat[i] = old + eps
            xp, fp = flat[i], forward().data[()]
            flat[i] = old - eps
            xm, fm = flat[i], forward().data[()]
            flat[i] = old
            # difference in the working dtype, divided by the step actually taken
            grad.reshape(-1)[i] = (fp - fm) / (xp - xm)
    return grad


def gradcheck(
    forward: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    reference_dtype=None,
    promote: Iterable[Tensor] = (),
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at each coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    ``forward`` must be deterministic; results are meaningless otherwise.
    With ``max_coords`` only that many randomly chosen coordinates per
    parameter are probed.

    ``reference_dtype`` (e.g. ``np.longdouble``) evaluates the central
    differences at higher precision: ``params`` and every tensor in
    ``promote`` are cast for the duration and ``forward`` runs under that
    default dtype. The analytic gradient is always taken at the original
    precision. This lowers the difference-quotient noise floor (about
    ``ulp(loss) / eps``) that otherwise dominates tiny gradient entries.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    loss = forward()
    analytic = backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        with _promoted(params, promote, reference_dtype):
            num = numeric_grad(forward, p, eps, coords)
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        n = num.reshape(-1)
        idx = np.arange(p.size) if coords is None else coords
        err = np.abs(a[idx] - n[idx]) / np.maximum(1e-8, np.abs(a[idx]) + np.abs(n[idx]))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


@contextlib.contextmanager
def _promoted(params, extra, dtype):
    if dtype is None:
        yield
        return
    tensors = {id(t): t for t in list(params) + list(extra)}.values()
    saved = [(t, t.data) for t in tensors]
    try:
        for t, data in saved:
            t.data = data.astype(dtype)
        with default_dtype(dtype):
            yield
    finally:
        for t, data in saved:
            t.data = data
