"""Finite-difference gradient verification.

grad_check runs a scalar-valued computation once with the tape to get
analytic gradients, then perturbs every input element with central
differences. Callers are expected to pass float64 tensors; tolerances
in the test suite assume that.
"""

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(fn, inputs, epsilon=1e-5, probes=None, seed=0):
    """Worst relative gradient error of fn over the given inputs.

    fn maps the list of Tensors to a scalar Tensor. Relative error per
    element is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    probes, when set, caps the number of elements probed per input
    (a seeded random subset) so large compositions stay affordable;
    by default every element is probed.
    """
    tensors = []
    for x in inputs:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        t.requires_grad = True
        t.grad = None
        tensors.append(t)

    out = fn(tensors)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued computation")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite forward value")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in tensors
    ]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if probes is not None and flat.size > probes:
            picked = rng.choice(flat.size, size=probes, replace=False)
        else:
            picked = range(flat.size)
        for idx in picked:
            orig = flat[idx]
            h = epsilon * max(1.0, abs(orig))
            with no_grad():
                flat[idx] = orig + h
                f_plus = float(fn(tensors).data)
                flat[idx] = orig - h
                f_minus = float(fn(tensors).data)
                flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("non-finite value during probing")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = ana.reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
