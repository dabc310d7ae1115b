"""Shared test utilities: finite-difference gradients and tiny oracles."""

import numpy as np

from vfcodec.nn.tensor import Tensor


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x (64-bit)."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_gradients(build_scalar, arrays, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Compare analytic and numeric gradients of build_scalar(*tensors).

    arrays: list of float64 numpy arrays; every array is treated as an input
    requiring gradients. Relative error uses a symmetric denominator.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build_scalar(*tensors)
    out.backward()
    for idx, (t, a) in enumerate(zip(tensors, arrays)):
        def fn(x, idx=idx):
            probe = [arr.copy() for arr in arrays]
            probe[idx] = x
            probe_tensors = [Tensor(p) for p in probe]
            return float(build_scalar(*probe_tensors).data)

        num = numeric_grad(fn, a.copy(), eps=eps)
        ana = t.grad
        assert ana is not None, f"input {idx} got no gradient"
        denom = np.maximum(np.abs(num) + np.abs(ana), 1.0e-3)
        rel = np.abs(num - ana) / denom
        worst = float(rel.max()) if rel.size else 0.0
        assert worst <= rtol or np.allclose(num, ana, atol=atol), (
            f"input {idx}: worst rel err {worst:.3e}\nnumeric:\n{num}\nanalytic:\n{ana}"
        )


def conv2d_reference(x, w, b=None, stride=1, padding=0):
    """Direct-summation convolution oracle (slow loops, independent path)."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    co, ci, kh, kw = w.shape
    _, h, wd = x.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((co, ho, wo), dtype=np.float64)
    for o in range(co):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            acc += x[c, oy * stride + i, ox * stride + j] * w[o, c, i, j]
                out[o, oy, ox] = acc + (b[o] if b is not None else 0.0)
    return out
