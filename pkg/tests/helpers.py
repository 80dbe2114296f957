"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from densedet import tensor as T


def finite_diff(fn, arrays, h=1e-5):
    """Central-difference gradients of scalar fn(*arrays) wrt each array."""
    grads = []
    for ai, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(fn(*arrays))
            flat[i] = keep - h
            fm = float(fn(*arrays))
            flat[i] = keep
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(build, arrays, rtol=1e-4, atol=1e-7, h=1e-5):
    """Compare autodiff grads of scalar build(*tensors) against central FD.

    ``arrays`` are float64 numpy arrays; ``build`` maps matching Tensors to a
    scalar Tensor.  Returns the worst relative error.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*tensors)
    out.backward()
    ana = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f(*arrs):
        consts = [T.Tensor(a, dtype=np.float64) for a in arrs]
        return build(*consts).data

    num = finite_diff(f, [a.copy() for a in arrays], h=h)
    worst = 0.0
    for a, n in zip(ana, num):
        denom = np.maximum(np.abs(n), np.abs(a))
        err = np.abs(a - n)
        bad = err > (atol + rtol * denom)
        if np.any(bad):
            i = np.unravel_index(np.argmax(err - rtol * denom), a.shape)
            raise AssertionError(
                f"gradient mismatch at {i}: autodiff {a[i]:.8g} vs fd {n[i]:.8g}"
            )
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(denom > atol, err / np.maximum(denom, 1e-300), 0.0)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst
