"""Finite-difference verification of autograd gradients.

Checks directional derivatives of a scalar loss against central
differences in float64. Used by the test suite to validate every
building block's backward pass.
"""

from __future__ import annotations

import torch


def _flatten(tensors):
    return torch.cat([t.reshape(-1) for t in tensors])


def directional_grad_errors(fn, tensors, n_directions=20, step=1e-3, generator=None):
    """Relative errors |fd - analytic| / max(|fd|, |analytic|, 1e-12).

    `fn(*tensors)` must return a scalar; `tensors` are float64 leaves
    perturbed jointly along random unit directions.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != torch.float64:
            raise ValueError("gradient checks require float64 tensors")
        t.requires_grad_(True)

    loss = fn(*tensors)
    grads = torch.autograd.grad(loss, tensors)
    flat_grad = _flatten([g.detach() for g in grads])

    errors = []
    with torch.no_grad():
        for _ in range(n_directions):
            direction = [
                torch.randn(t.shape, dtype=torch.float64, generator=generator) for t in tensors
            ]
            norm = _flatten(direction).norm()
            direction = [d / norm for d in direction]

            plus = [t + step * d for t, d in zip(tensors, direction)]
            minus = [t - step * d for t, d in zip(tensors, direction)]
            fd = (fn(*plus) - fn(*minus)).item() / (2.0 * step)
            analytic = (flat_grad * _flatten(direction)).sum().item()
            denom = max(abs(fd), abs(analytic), 1e-12)
            errors.append(abs(fd - analytic) / denom)
    return errors


def check_module_gradients(module, inputs, n_directions=20, step=1e-3, seed=0):
    """Max relative FD error for a module's backward pass.

    The module is cast to float64 and run in train mode. The scalar loss
    is a fixed random weighting of the (first) output, so every output
    element influences the check. Inputs and all parameters are perturbed
    jointly; the check covers gradients w.r.t. both.
    """
    module = module.double()
    module.train()
    gen = torch.Generator().manual_seed(seed)
    inputs = [i.detach().double() for i in inputs]
    params = [p for p in module.parameters() if p.requires_grad]
    n_inputs = len(inputs)

    with torch.no_grad():
        probe = module(*inputs)
        if isinstance(probe, tuple):
            probe = probe[0]
    weights = torch.randn(probe.shape, dtype=torch.float64, generator=gen)

    def loss_fn(*leaves):
        ins, pars = leaves[:n_inputs], leaves[n_inputs:]
        for p, v in zip(params, pars):
            if p is not v:  # finite-difference pass: load perturbed values
                with torch.no_grad():
                    p.copy_(v)
        out = module(*ins)
        if isinstance(out, tuple):
            out = out[0]
        return (out * weights).sum()

    errs = directional_grad_errors(
        loss_fn, inputs + params, n_directions=n_directions, step=step, generator=gen
    )
    return max(errs)
