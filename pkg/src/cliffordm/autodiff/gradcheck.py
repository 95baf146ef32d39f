"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: list = field(default_factory=list)
    h: float = 1e-5
    tol: float = 1e-6
    passed: bool = False

    @property
    def worst(self) -> float:
        return max(self.max_rel_error) if self.max_rel_error else 0.0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op}: max rel err {self.worst:.3e} (tol {self.tol:.0e}, h {self.h:.0e})"


def _scalarize(out: Tensor, probe: np.ndarray) -> Tensor:
    return (out * Tensor(probe)).sum()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-6,
    name: str = "op",
    seed: int = 0,
    max_coords: int | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn`` against central differences.

    ``fn`` maps f64 tensors to a tensor; a fixed random probe turns the output
    into a scalar so every output coordinate contributes. The relative error
    per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_coords``
    checks a seeded random subset of coordinates per input, for large inputs.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    if not all(np.isfinite(a).all() for a in arrays):
        raise ValueError("grad_check inputs must be finite")

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    probe = rng.standard_normal(out.shape)
    _scalarize(out, probe).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def evaluate(vals):
        return float(_scalarize(fn(*[Tensor(v) for v in vals]), probe).data)

    errors = []
    for k, a in enumerate(arrays):
        flat_idx = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            flat_idx = np.sort(rng.choice(a.size, size=max_coords, replace=False))
        worst = 0.0
        for i in flat_idx:
            idx = np.unravel_index(i, a.shape)
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
            exact = float(analytic[k][idx])
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
        errors.append(worst)
    return GradCheckReport(op=name, max_rel_error=errors, h=h, tol=tol, passed=max(errors, default=0.0) < tol)



def module_grad_check(
    forward: Callable[..., Tensor],
    module,
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    name: str = "module",
    seed: int = 0,
    max_coords: int | None = 24,
) -> GradCheckReport:
    """Like :func:`grad_check`, covering the module's parameters as well.

    ``forward(module, *tensors)`` must be deterministic across calls (pass
    fresh, identically seeded generators for stochastic layers). The module
    is cast to float64 in place. Errors are listed inputs first, then
    parameters in ``named_parameters`` order.
    """
    rng = np.random.default_rng(seed)
    module.astype(np.float64)
    params = [p for _, p in module.named_parameters()]
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    buffers = [(buf, buf.copy()) for _, buf in module.named_buffers()]

    def run(grad=False):
        for buf, saved in buffers:  # running statistics must not drift between calls
            buf[...] = saved
        tensors = [Tensor(a.copy(), requires_grad=grad) for a in arrays]
        return forward(module, *tensors), tensors

    module.zero_grad()
    out, tensors = run(grad=True)
    probe = rng.standard_normal(out.shape)
    _scalarize(out, probe).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    analytic += [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    module.zero_grad()

    def evaluate():
        return float(_scalarize(run()[0], probe).data)

    errors = []
    for k, holder in enumerate(arrays + [p.data for p in params]):
        flat_idx = np.arange(holder.size)
        if max_coords is not None and holder.size > max_coords:
            flat_idx = np.sort(rng.choice(holder.size, size=max_coords, replace=False))
        worst = 0.0
        for i in flat_idx:
            idx = np.unravel_index(i, holder.shape)
            orig = holder[idx]
            holder[idx] = orig + h
            fp = evaluate()
            holder[idx] = orig - h
            fm = evaluate()
            holder[idx] = orig
            numeric = (fp - fm) / (2 * h)
            exact = float(analytic[k][idx])
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8))
        errors.append(worst)
    run()
    return GradCheckReport(op=name, max_rel_error=errors, h=h, tol=tol, passed=max(errors, default=0.0) < tol)
