"""Central finite-difference gradient check shared by the test modules."""

import torch


def fd_check(fn, inputs, step=1e-5, tol=1e-4):
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs)
    worst = 0.0
    for k, (x, g) in enumerate(zip(inputs, grads)):
        num = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            args = [y.detach() for y in inputs]
            pert = args[k].clone().view(-1)
            pert[i] = orig + step
            up = float(fn(*[pert.view_as(x) if j == k else a for j, a in enumerate(args)]))
            pert[i] = orig - step
            down = float(fn(*[pert.view_as(x) if j == k else a for j, a in enumerate(args)]))
            num.view(-1)[i] = (up - down) / (2 * step)
        err = (g - num).norm() / max(num.norm(), g.norm(), 1e-12)
        assert float(err) < tol, f"input {k}: relative error {float(err):.2e}"
        worst = max(worst, float(err))
    return worst
