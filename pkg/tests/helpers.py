"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from sivfn import numkernel as nk

# criterion number -> (passed, name, detail); printed by the conftest summary hook
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record_criterion(n: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), name, detail)
    print(f"{'PASS' if ok else 'FAIL'} [{n:2d}] {name}: {detail}")
    assert ok, f"criterion {n} ({name}) failed: {detail}"


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom < 1e-300 else float(np.linalg.norm(a - b) / denom)


def autodiff_grad(f, *tensors):
    """Gradients of scalar ``f(*tensors)`` w.r.t. each tensor, via one tape."""
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with nk.Tape() as tape:
        out = f(*tensors)
    tape.backward(out)
    return [t.grad.copy() for t in tensors]


def grad_check(f, arrays, eps: float = 1e-6) -> float:
    """Largest relative error between autodiff and central differences over all inputs."""
    with nk.precision(64):
        tensors = [nk.Tensor(a, dtype=np.float64) for a in arrays]
        analytic = autodiff_grad(f, *tensors)
        worst = 0.0
        for i, t in enumerate(tensors):
            def fi(x, i=i):
                args = list(tensors)
                args[i] = x
                return f(*args)
            numeric = nk.numeric_gradient(fi, nk.Tensor(t.data.copy(), dtype=np.float64), eps)
            worst = max(worst, rel_error(analytic[i], numeric))
    return worst


def conv2d_loops(x, w, b=None, stride=1):
    """Nested-loop valid cross-correlation oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = x[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, oi, i, j] = np.sum(patch * w[oi]) + (0.0 if b is None else b[oi])
    return out


def xcorr_loops(z, x):
    n, c, hz, wz = z.shape
    _, _, hx, wx = x.shape
    out = np.zeros((n, c, hx - hz + 1, wx - wz + 1))
    for ni in range(n):
        for ci in range(c):
            for i in range(hx - hz + 1):
                for j in range(wx - wz + 1):
                    out[ni, ci, i, j] = np.sum(x[ni, ci, i:i + hz, j:j + wz] * z[ni, ci])
    return out
