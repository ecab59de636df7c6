"""Central finite-difference gradient checking shared by unit and acceptance
tests. Inputs are float64 and constructed away from kinks (|x| at 0, the
alignment-target clamp, probability clamps) so the FD stencil is valid."""

import numpy as np
import torch


def finite_difference_check(fn, tensors, rng, n_probe=64, step=1e-4, rtol=1e-4):
    """Compare autograd gradients of ``fn(*tensors)`` against central finite
    differences at ``n_probe`` random coordinates of the differentiable inputs.

    Returns the worst relative error observed.
    """
    leaves = [t for t in tensors if t.requires_grad]
    out = fn(*tensors)
    grads = torch.autograd.grad(out, leaves)
    flat_sizes = [t.numel() for t in leaves]
    total = sum(flat_sizes)
    worst = 0.0
    for _ in range(n_probe):
        flat_idx = int(rng.integers(total))
        leaf_i, offset = 0, flat_idx
        while offset >= flat_sizes[leaf_i]:
            offset -= flat_sizes[leaf_i]
            leaf_i += 1
        leaf = leaves[leaf_i]
        base = leaf.detach().clone()
        idx = np.unravel_index(offset, leaf.shape)

        def eval_at(delta):
            shifted = base.clone()
            shifted[idx] += delta
            probe_tensors = []
            k = 0
            for t in tensors:
                if t.requires_grad:
                    probe_tensors.append(shifted if k == leaf_i else leaves[k].detach())
                    k += 1
                else:
                    probe_tensors.append(t)
            return fn(*probe_tensors).item()

        fd = (eval_at(step) - eval_at(-step)) / (2 * step)
        an = float(grads[leaf_i][idx])
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, err)
        assert err <= rtol, (f"gradient mismatch at leaf {leaf_i} {idx}: "
                             f"fd={fd:.8g} autograd={an:.8g} rel={err:.3g}")
    return worst


# -- kink-free random inputs for each loss ----------------------------------

def l1_direction_inputs(rng, k=3, n_p=8):
    """Matched point sets with coordinate gaps >= 0.05 (away from |x| kinks)
    and segment norms bounded away from zero."""
    gt = np.cumsum(rng.uniform(0.5, 1.5, size=(k, n_p, 2)), axis=1)
    gap = rng.uniform(0.05, 0.2, size=(k, n_p, 2)) * rng.choice([-1.0, 1.0], size=(k, n_p, 2))
    pred = torch.tensor(gt + gap, dtype=torch.float64, requires_grad=True)
    return pred, torch.tensor(gt, dtype=torch.float64)


def aligned_cls_inputs(rng, n_pos=6, n_neg=10):
    pos = torch.tensor(rng.uniform(0.1, 0.9, size=n_pos), dtype=torch.float64,
                       requires_grad=True)
    dist = torch.tensor(rng.uniform(0.05, 0.85, size=n_pos), dtype=torch.float64)
    neg = torch.tensor(rng.uniform(0.05, 0.9, size=n_neg), dtype=torch.float64,
                       requires_grad=True)
    return pos, dist, neg


def change_loss_inputs(rng, n=6, m=4):
    from mapupdate.training import ChangeTargets
    logits = torch.tensor(rng.normal(0, 1.5, size=(n, m + 1)), dtype=torch.float64,
                          requires_grad=True)
    rows = list(range(n))
    excluded = set(rng.choice(rows, size=max(0, n // 4), replace=False).tolist())
    targets = {r: int(rng.integers(0, m + 1)) for r in rows if r not in excluded}
    return logits, ChangeTargets(targets, frozenset(excluded), m)
