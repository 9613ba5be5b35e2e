"""Shared test utilities, chiefly the central finite-difference oracle."""

import numpy as np

from hypersde.autodiff import Tape


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f(*arrays) w.r.t. each array.

    ``f`` must be a pure function of numpy arrays returning a float.  This
    deliberately knows nothing about the tape machinery it checks.
    """
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        flat = g.reshape(-1)
        base = [a.copy() for a in arrays]
        for i in range(arr.size):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[k].reshape(-1)[i] += h
            minus[k].reshape(-1)[i] -= h
            flat[i] = (f(*plus) - f(*minus)) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-5):
    """Worst-case relative disagreement with a small-magnitude floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def tape_gradients(build, arrays):
    """Run ``build`` (leaves -> scalar Tensor) on a fresh tape, return grads."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = build(*leaves)
    tape.backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def check_grads(build, f, arrays, tol=1e-4, h=1e-5, floor=1e-5):
    """Assert analytic tape gradients match the finite-difference oracle."""
    analytic = tape_gradients(build, arrays)
    numeric = finite_difference(f, arrays, h=h)
    worst = max(rel_err(a, n, floor=floor) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol:.0e}"
    return worst
