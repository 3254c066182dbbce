"""Finite-difference gradient checking shared by module and acceptance tests."""

import torch


def fd_gradient_check(module, make_loss, step=1e-5, rtol=1e-4):
    """Compare autograd gradients of every parameter tensor against central
    finite differences. make_loss must re-run the forward pass from the
    module's current parameters and return a scalar tensor. Returns
    (failures, worst_rel): the list of (name, rel_err) tensors exceeding
    rtol, and the largest relative error seen.
    """
    module.zero_grad()
    loss = make_loss()
    loss.backward()
    failures = []
    worst = 0.0
    for name, param in module.named_parameters():
        assert param.grad is not None, f"no gradient reached {name}"
        analytic = param.grad.detach().clone()
        fd = torch.zeros_like(param)
        flat = param.data.view(-1)
        fd_flat = fd.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = make_loss().item()
                flat[i] = orig - step
                down = make_loss().item()
                flat[i] = orig
                fd_flat[i] = (up - down) / (2.0 * step)
        denom = max(analytic.norm().item(), fd.norm().item(), 1e-12)
        rel = (analytic - fd).norm().item() / denom
        worst = max(worst, rel)
        if rel >= rtol:
            failures.append((name, rel))
    return failures, worst
