"""Shared oracles for the test suite.

The gradient helpers compare reverse-mode results against central finite
differences computed in 64-bit, element by element for small arrays and
along random directions for whole models.
"""
from __future__ import annotations

import numpy as np

from cir2 import tensor as T


def fd_scalar(fn, arrays: list[np.ndarray], which: int, index: tuple,
              eps: float) -> float:
    """Central difference of ``fn`` w.r.t. one element of one input array."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which][index] += eps
    minus[which][index] -= eps
    with T.no_grad():
        up = fn(*[T.Tensor(a) for a in plus]).item()
        dn = fn(*[T.Tensor(a) for a in minus]).item()
    return (up - dn) / (2.0 * eps)


def grad_check(fn, *arrays, eps: float = 1e-6, rtol: float = 1e-5,
               atol: float = 1e-8) -> None:
    """Assert analytic gradients of scalar ``fn`` match finite differences.

    ``fn`` maps one Tensor per input array to a scalar Tensor.  All inputs
    are promoted to float64 so truncation, not roundoff, dominates the
    difference quotient.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if out.size != 1:
        raise AssertionError(f"grad_check needs a scalar objective, got {out.shape}")
    out.backward()
    for which, t in enumerate(tensors):
        assert t.grad is not None, f"input {which} received no gradient"
        fd = np.zeros_like(arrays[which])
        it = np.nditer(fd, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            fd[idx] = fd_scalar(fn, arrays, which, idx, eps)
            it.iternext()
        np.testing.assert_allclose(t.grad, fd, rtol=rtol, atol=atol,
                                   err_msg=f"input {which}")


def randomize_params(params: dict[str, T.Tensor], rng: np.random.Generator,
                     scale: float = 0.3) -> None:
    """Move parameters to a generic point with healthy gradient signal.

    Freshly initialized scorer heads sit in a nearly flat region where
    directional derivatives are ~1e-7 and a difference quotient is pure
    roundoff; gradient checks are only informative away from it.
    """
    for p in params.values():
        p.data = rng.normal(scale=scale, size=p.shape).astype(p.data.dtype)


def directional_check(loss_fn, params: dict[str, T.Tensor],
                      rng: np.random.Generator, eps: float = 1e-6
                      ) -> float:
    """Relative error between tape gradient and a directional derivative.

    ``loss_fn`` recomputes the scalar loss from the current parameter
    values; parameters must already hold float64 data.  Returns
    |fd - analytic| / max(|fd|, |analytic|).
    """
    loss = loss_fn()
    for p in params.values():
        p.grad = None
    loss.backward()
    direction = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    analytic = 0.0
    for k, p in params.items():
        if p.grad is not None:
            analytic += float(np.sum(p.grad * direction[k]))
    saved = {k: p.data.copy() for k, p in params.items()}
    try:
        for k, p in params.items():
            p.data = saved[k] + eps * direction[k]
        with T.no_grad():
            up = loss_fn().item()
        for k, p in params.items():
            p.data = saved[k] - eps * direction[k]
        with T.no_grad():
            dn = loss_fn().item()
    finally:
        for k, p in params.items():
            p.data = saved[k]
    fd = (up - dn) / (2.0 * eps)
    denom = max(abs(fd), abs(analytic), 1e-12)
    return abs(fd - analytic) / denom
