import torch


def central_difference_check(fn, tensors, step=1e-4, max_coords=40, generator=None):
    """Largest relative error between autograd and central differences.

    ``fn`` maps nothing to a scalar and reads ``tensors`` (float64 leaves with
    requires_grad). At most ``max_coords`` coordinates per tensor are probed.
    """
    gen = generator or torch.Generator().manual_seed(0)
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone().reshape(-1)
        flat = t.data.reshape(-1)
        n = flat.numel()
        coords = torch.randperm(n, generator=gen)[:max_coords] if n > max_coords else torch.arange(n)
        num, ana = [], []
        for i in coords.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                plus = fn().item()
                flat[i] = orig - step
                minus = fn().item()
                flat[i] = orig
            num.append((plus - minus) / (2 * step))
            ana.append(analytic[i].item())
        num_t, ana_t = torch.tensor(num, dtype=torch.float64), torch.tensor(ana, dtype=torch.float64)
        scale = max(num_t.norm().item(), ana_t.norm().item())
        if scale < 1e-8:  # gradient identically zero (e.g. a softmax-invariant bias)
            continue
        worst = max(worst, (num_t - ana_t).norm().item() / scale)
    return worst
