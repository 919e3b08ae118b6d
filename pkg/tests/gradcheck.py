"""Central finite-difference gradient checker (the independent oracle).

Compares autograd gradients of a scalar-valued closure against central
differences with h = 1e-5 in double precision. Relative error of a pair
(analytic, numeric) is |a - n| / max(|a|, |n|); pairs where both magnitudes
fall below the zero floor count as zero error (FD noise dominates there).
"""

import torch

H_STEP = 1e-5
ZERO_FLOOR = 1e-7


def max_relative_error(f, tensors, h=H_STEP):
    """f: () -> scalar tensor built from `tensors` (float64 leaves)."""
    for t in tensors:
        assert t.dtype == torch.float64, "finite differences need double precision"
        assert t.requires_grad
    loss = f()
    grads = torch.autograd.grad(loss, tensors)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                f_plus = float(f())
                flat[i] = old - h
                f_minus = float(f())
                flat[i] = old
                numeric = (f_plus - f_minus) / (2.0 * h)
                analytic = float(gflat[i])
                scale = max(abs(numeric), abs(analytic))
                rel = 0.0 if scale < ZERO_FLOOR else abs(numeric - analytic) / scale
                worst = max(worst, rel)
    return worst


def module_check(module, inputs, scalarize, h=H_STEP):
    """Check all parameters of `module` plus the given input tensors.

    scalarize: () -> scalar tensor running the module on `inputs`.
    """
    module.double()
    tensors = [p for p in module.parameters() if p.requires_grad]
    tensors += [t for t in inputs if t.requires_grad]
    return max_relative_error(scalarize, tensors, h=h)
