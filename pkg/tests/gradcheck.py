"""Central finite-difference checks of autograd gradients, per parameter tensor."""
import numpy as np
import torch

REL_TOL = 1e-4


GRAD_FLOOR = 1e-5
# A difference quotient resolves nothing finer than a few ulps of the loss
# over 2*eps.  Probes where both estimates sit below that (biases cancelled by
# batch statistics have an exact zero gradient) agree at zero.
ROUNDOFF_ULPS = 1e3


def rel_err(a: float, b: float, floor: float = GRAD_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def probe_err(a: float, n: float, loss: float, eps: float) -> float:
    resolution = ROUNDOFF_ULPS * np.finfo(np.float64).eps * max(1.0, abs(loss)) / eps
    if max(abs(a), abs(n)) < resolution:
        return 0.0
    return rel_err(a, n)


@torch.no_grad()
def _perturbed(loss_fn, param, direction, eps):
    orig = param.detach().clone()
    param.add_(direction, alpha=eps)
    fp = float(loss_fn())
    param.copy_(orig - eps * direction)
    fm = float(loss_fn())
    param.copy_(orig)
    return (fp - fm) / (2 * eps)


def check_gradients(named_params, loss_fn, eps=1e-6, n_dirs=2, n_coords=3, seed=0):
    """Compare autograd against central differences for every parameter.

    Each tensor is probed along ``n_dirs`` random directions and at its
    ``n_coords`` largest-gradient coordinates.  Returns a list of
    ``(name, probe, analytic, numeric, rel_err)`` rows.
    """
    named_params = list(named_params)
    params = [p for _, p in named_params]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    L = float(loss.detach())
    rng = np.random.default_rng(seed)
    rows = []
    for (name, p), g in zip(named_params, grads):
        g = torch.zeros_like(p) if g is None else g
        for k in range(n_dirs):
            v = torch.from_numpy(rng.standard_normal(p.shape)).to(p.dtype)
            a = float((g * v).sum())
            n = _perturbed(loss_fn, p, v, eps)
            rows.append((name, f"dir{k}", a, n, probe_err(a, n, L, eps)))
        flat = g.reshape(-1).abs()
        for idx in torch.argsort(flat, descending=True)[:n_coords].tolist():
            e = torch.zeros(p.numel(), dtype=p.dtype)
            e[idx] = 1.0
            a = float(g.reshape(-1)[idx])
            n = _perturbed(loss_fn, p, e.reshape(p.shape), eps)
            rows.append((name, f"coord{idx}", a, n, probe_err(a, n, L, eps)))
    return rows


def worst(rows):
    return max(rows, key=lambda r: r[4])
