"""Finite-difference gradient oracle shared by the unit and acceptance tests.

Checks the directional derivative: for a random unit direction delta,
<grad f, delta> must match (f(x + h*delta) - f(x - h*delta)) / 2h.
All checks run in float64.
"""

import numpy as np


def directional_grad_check(build_scalar, leaves, rng, h=1e-5):
    """Return (analytic, numeric) directional derivatives.

    `build_scalar()` evaluates the function under test and returns a scalar
    Tensor; it must read its inputs from `leaves` (float64 Tensors with
    requires_grad=True) so the perturbation below is visible.
    """
    for leaf in leaves:
        leaf.grad = None
    out = build_scalar()
    out.backward()
    deltas = []
    for leaf in leaves:
        d = rng.normal(size=leaf.data.shape)
        d /= np.linalg.norm(d.ravel()) + 1e-300
        deltas.append(d)
    analytic = sum(
        float(np.vdot(leaf.grad if leaf.grad is not None else 0.0, d))
        for leaf, d in zip(leaves, deltas))

    bases = [leaf.data.copy() for leaf in leaves]
    values = []
    for sign in (+1.0, -1.0):
        for leaf, base, d in zip(leaves, bases, deltas):
            leaf.data = base + sign * h * d
        values.append(float(build_scalar().data))
    for leaf, base in zip(leaves, bases):
        leaf.data = base
    numeric = (values[0] - values[1]) / (2.0 * h)
    return analytic, numeric


def assert_grad_matches(build_scalar, leaves, rng, h=1e-5, rel_tol=1e-4):
    analytic, numeric = directional_grad_check(build_scalar, leaves, rng, h=h)
    scale = max(abs(analytic), abs(numeric), 1e-8)
    rel = abs(analytic - numeric) / scale
    assert rel < rel_tol, f"gradient mismatch: analytic={analytic}, fd={numeric}, rel={rel:.3e}"
