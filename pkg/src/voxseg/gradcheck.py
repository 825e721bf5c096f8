"""Central finite-difference gradient checking.

The numeric side only ever calls the forward path, so it stays independent of
the taped backward implementation it is used to verify.
"""

from __future__ import annotations

import numpy as np

from voxseg.autodiff import Tape, Tensor, backward

# Tolerances: 32-bit forwards limit the difference quotient to ~1e-3 relative
# accuracy; 64-bit leaves plenty of headroom below 1e-6.
REL_TOL = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}
_STEP = {np.dtype(np.float32): 2e-2, np.dtype(np.float64): 1e-4}
_NOISE_SAFETY = 8.0


def numeric_gradient(loss_fn, param: Tensor, indices=None, step=None) -> np.ndarray:
    """d loss_fn() / d param by central differences at the given flat indices.

    ``loss_fn`` must recompute the loss from the tensors' current ``data``;
    it is invoked twice per coordinate with the coordinate displaced by
    ``±step``. Returns an array aligned with ``indices`` (all coordinates
    when ``indices`` is None).
    """
    flat = param.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    indices = list(indices)
    h = step if step is not None else _STEP[param.data.dtype]
    grads = np.empty(len(indices), dtype=np.float64)
    for row, i in enumerate(indices):
        keep = flat[i]
        flat[i] = keep + h
        hi = float(loss_fn())
        flat[i] = keep - h
        lo = float(loss_fn())
        flat[i] = keep
        grads[row] = (hi - lo) / (2.0 * h)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, tiny: float = 1e-12) -> float:
    """Relative error ||a - n|| / max(||a||, ||n||) over the compared coordinates.

    The vector-norm form is the usual way to make "relative" well defined when
    individual gradient entries pass through zero.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), tiny)
    return float(np.linalg.norm(a - n)) / denom


def check_gradients(
    build_loss,
    params: dict[str, Tensor],
    rel_tol: float | None = None,
    max_coords: int = 12,
    seed: int = 0,
    step: float | None = None,
) -> float:
    """Compare taped gradients of ``build_loss()`` against central differences.

    ``build_loss`` runs a fresh forward pass and returns the scalar loss
    tensor. Up to ``max_coords`` coordinates per parameter are sampled with a
    seeded RNG (every coordinate for small tensors). A parameter passes when

        ||analytic - numeric|| <= rel_tol * max(||analytic||, ||numeric||) + noise

    where ``noise`` is the resolution limit of the difference quotient itself,
    ``eps * |loss| / (2h)`` per coordinate (times a safety factor): beyond it
    the comparison carries no information. Returns the worst relative error
    observed and raises AssertionError on failure.
    """
    with Tape():
        loss = build_loss()
        backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items() if p.requires_grad}
    loss_mag = abs(float(loss.data)) + 1.0

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        n = p.data.size
        if n <= max_coords:
            idx = list(range(n))
        else:
            idx = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
        numeric = numeric_gradient(lambda: build_loss().data, p, idx, step=step)
        ana = analytic[name].reshape(-1)[idx].astype(np.float64)
        dt = p.data.dtype
        h = step if step is not None else _STEP[dt]
        noise = _NOISE_SAFETY * np.finfo(dt).eps * loss_mag / (2.0 * h) * np.sqrt(len(idx))
        tol = rel_tol if rel_tol is not None else REL_TOL[dt]
        diff = float(np.linalg.norm(ana - numeric))
        scale = max(float(np.linalg.norm(ana)), float(np.linalg.norm(numeric)))
        err = diff / max(scale, 1e-12)
        if diff > tol * scale + noise:
            raise AssertionError(
                f"gradient check failed for {name!r}: rel err {err:.3e} > {tol:.1e} "
                f"(noise floor {noise:.1e})"
            )
        if diff > noise:
            worst = max(worst, err)
    return worst
