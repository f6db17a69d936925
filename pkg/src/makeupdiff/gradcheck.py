"""Central finite-difference check of autograd gradients, coordinate-sampled per parameter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class GradCheckResult:
    name: str
    n_checked: int
    n_passed: int
    worst: float

    @property
    def pass_rate(self) -> float:
        return self.n_passed / self.n_checked if self.n_checked else 1.0


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    # both tiny -> the coordinate carries no signal and is counted as agreeing
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0
    return abs(analytic - numeric) / scale


def check_gradients(module: nn.Module, loss_fn, n_coords: int = 8, step: float = 1e-4, tol: float = 1e-3,
                    seed: int = 0, params: dict[str, nn.Parameter] | None = None) -> list[GradCheckResult]:
    """Compare autograd against central differences on sampled coordinates of every parameter.

    ``loss_fn()`` must return a scalar tensor computed from ``module``; run it in float64.
    """
    rng = np.random.default_rng(seed)
    params = dict(module.named_parameters()) if params is None else params
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {k: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for k, p in params.items()}
    results = []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            passed, worst = 0, 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                err = relative_error(grads[name].view(-1)[i].item(), numeric)
                worst = max(worst, err)
                passed += err <= tol
            results.append(GradCheckResult(name, len(idx), passed, worst))
    return results


def overall_pass_rate(results: list[GradCheckResult]) -> float:
    total = sum(r.n_checked for r in results)
    return sum(r.n_passed for r in results) / total if total else 1.0
