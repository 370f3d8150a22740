"""Central finite-difference gradient checking for the autodiff substrate.

The oracle perturbs one parameter entry at a time by +/-h, reruns the full
forward pass, and compares (f(x+h) - f(x-h)) / 2h against the analytic
gradient. Kept independent of the library's backward rules on purpose.
"""

import numpy as np

from flowvgae.autodiff import Tape, backward, zero_grads


def numeric_grad(f, params, name, h=1e-5):
    """Finite-difference gradient of scalar f() w.r.t. params[name].

    ``f`` must be a zero-argument callable that reads the (mutated)
    parameter values and returns a float.
    """
    p = params[name]
    g = np.zeros_like(p.values)
    flat = p.values.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def analytic_grads(loss_fn, params):
    """Run one taped forward/backward pass; return {name: grad array}."""
    zero_grads(params.values())
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    return {name: (np.zeros_like(p.values) if p.grad is None else p.grad.copy())
            for name, p in params.items()}


def max_rel_error(analytic, numeric, floor=1e-8):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(loss_fn, params, h=1e-5, floor=1e-8):
    """Return {name: max relative error} comparing backward vs finite differences."""
    ana = analytic_grads(loss_fn, params)
    errs = {}
    for name in params:
        num = numeric_grad(lambda: loss_fn().item(), params, name, h=h)
        errs[name] = max_rel_error(ana[name], num, floor=floor)
    return errs
