"""Central finite-difference gradient checking against autograd, in float64."""

import torch


def finite_difference_check(fn, inputs, eps=1e-6, max_coords=200, seed=0):
    """Return the worst relative error between autograd and central FD.

    fn(*tensors) must produce a scalar tensor and be deterministic. All
    tensors are promoted to float64. For large tensors a random subset of
    max_coords coordinates is probed.
    """
    base = [t.detach().to(torch.float64).clone().contiguous() for t in inputs]
    tracked = [b.clone().requires_grad_(True) for b in base]
    out = fn(*tracked)
    grads = torch.autograd.grad(out, tracked)

    def evaluate():
        with torch.no_grad():
            return fn(*base).item()

    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for b, g in zip(base, grads):
        flat = b.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        if n <= max_coords:
            coords = range(n)
        else:
            coords = torch.randperm(n, generator=gen)[:max_coords].tolist()
        for idx in coords:
            orig = flat[idx].item()
            flat[idx] = orig + eps
            f_plus = evaluate()
            flat[idx] = orig - eps
            f_minus = evaluate()
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = gflat[idx].item()
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-5)
            worst = max(worst, err)
    return worst
