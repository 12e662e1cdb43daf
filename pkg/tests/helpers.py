import numpy as np
import torch


def random_probs(rng, B, C, H, W, temperature=1.0):
    logits = torch.from_numpy(rng.normal(size=(B, C, H, W)) * temperature)
    return torch.softmax(logits, dim=1)


def random_labels(rng, B, H, W, values):
    return torch.from_numpy(rng.choice(np.asarray(values), size=(B, H, W)).astype(np.int64))


def random_partition(rng, K, N):
    """Random disjoint non-empty organ sets tiling 1..K."""
    organs = rng.permutation(np.arange(1, K + 1)).tolist()
    cuts = sorted(rng.choice(np.arange(1, K), size=N - 1, replace=False).tolist())
    parts, prev = [], 0
    for c in cuts + [K]:
        parts.append(sorted(organs[prev:c]))
        prev = c
    return parts


def central_difference(fn, x, h=1e-4):
    """Numerical gradient of scalar ``fn`` at float64 tensor ``x``."""
    grad = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        fp = fn(flat.reshape(x.shape)).item()
        flat[k] = orig - h
        fm = fn(flat.reshape(x.shape)).item()
        flat[k] = orig
        grad.reshape(-1)[k] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = a.reshape(-1), b.reshape(-1)
    return (torch.linalg.norm(a - b) / max(torch.linalg.norm(a).item(), torch.linalg.norm(b).item(), 1e-12)).item()
