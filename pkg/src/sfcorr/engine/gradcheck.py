"""Central finite-difference verification of the analytic adjoints.

Relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``. The floor
is the larger of 1e-3 times the largest numeric gradient magnitude in the
same tensor and the rounding-noise level of the difference quotient,
``1e4 * eps * max(|f|, 1) / h``, so entries that are negligible next to their
tensor, or below what a central difference can resolve, are judged on an
absolute scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import GradCheckError
from . import ops
from .tensor import Tensor, topo_order

H = 1e-5


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = H) -> np.ndarray:
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def numerical_grad_at(f: Callable[[], float], arr: np.ndarray, flat_idx: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences for the listed flat entries of ``arr`` only."""
    flat = arr.reshape(-1)
    out = np.zeros(len(flat_idx))
    for n, i in enumerate(flat_idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * h)
    return out


def noise_floor(f0: float, h: float = H) -> float:
    return 1e4 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / h


def relative_error(analytic: np.ndarray, numeric: np.ndarray, noise: float = 1e-10) -> tuple[float, int]:
    scale = float(np.max(np.abs(numeric))) if numeric.size else 0.0
    floor = max(1e-3 * scale, noise)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    idx = int(np.argmax(err)) if err.size else 0
    return (float(err.reshape(-1)[idx]) if err.size else 0.0), idx


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, tuple[float, int]] = field(default_factory=dict)
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e, _ in self.errors.values())

    @property
    def worst(self) -> tuple[str, float, int]:
        name = max(self.errors, key=lambda k: self.errors[k][0])
        return name, *self.errors[name]

    def merge(self, key: str, err: float, idx: int) -> None:
        prev = self.errors.get(key)
        if prev is None or err > prev[0]:
            self.errors[key] = (err, idx)

    def raise_if_failed(self) -> None:
        for key, (err, idx) in self.errors.items():
            if err >= self.tol:
                raise GradCheckError(key, idx, err, self.tol)


def _consumer_ops(root: Tensor, params: dict[str, Tensor]) -> dict[str, str]:
    owners: dict[int, str] = {}
    for t in topo_order(root):
        for inp in t.node.inputs:
            owners.setdefault(id(inp), t.node.op)
    return {name: owners.get(id(p), "unused") for name, p in params.items()}


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], tol: float = 1e-4,
               h: float = H, raise_on_fail: bool = True, sample: int | None = None,
               seed: int = 0, kink_retry: bool = False) -> GradCheckReport:
    """Compare analytic and numeric gradients of a scalar graph.

    ``loss_fn`` rebuilds the graph from the current parameter values each
    call. Report keys are ``"<op>:<param>"`` where ``op`` is the op that
    consumes the parameter. With ``sample`` set, only that many randomly
    chosen entries of each parameter are differenced (large models).

    With ``kink_retry``, an entry that fails at ``h`` is differenced again at
    h/10 and h/100; if both agree with the analytic value the failure is
    attributed to a ReLU kink inside the step (counted in ``report.kinks``).
    A wrong adjoint disagrees at every step size and still fails.
    """
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    loss = loss_fn()
    noise = noise_floor(loss.item(), h)
    owners = _consumer_ops(loss, params)
    loss.backward()
    report = GradCheckReport(tol)

    def f() -> float:
        return loss_fn().item()

    rng = np.random.default_rng(seed)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if sample is None or sample >= p.data.size:
            numeric = numerical_grad(f, p.data, h)
            err, idx = relative_error(analytic, numeric, noise)
        else:
            picks = np.sort(rng.choice(p.data.size, size=sample, replace=False))
            numeric = numerical_grad_at(f, p.data, picks, h)
            a = analytic.reshape(-1)[picks]
            err, j = relative_error(a, numeric, noise)
            if kink_retry and err >= tol:
                err, j = _retry_kinks(f, p.data, picks, a, numeric, h, noise, tol, report)
            idx = int(picks[j])
        report.merge(f"{owners[name]}:{name}", err, idx)
    if raise_on_fail:
        report.raise_if_failed()
    return report


def _retry_kinks(f, arr, picks, analytic, numeric, h, noise, tol, report):
    floor = max(1e-3 * float(np.max(np.abs(numeric))), noise)
    errs = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    for n in np.flatnonzero(errs >= tol):
        finer = [numerical_grad_at(f, arr, picks[n:n + 1], h / s)[0] for s in (10, 100)]
        fine_err = max(abs(analytic[n] - v) / max(abs(analytic[n]), abs(v), floor) for v in finer)
        if fine_err < tol:
            errs[n] = fine_err
            report.kinks += 1
    j = int(np.argmax(errs))
    return float(errs[j]), j


# --------------------------------------------------------------------------
# per-op random cases
# --------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _case(name: str, rng: np.random.Generator):
    """Random inputs and constant kwargs for one check of op ``name``."""
    n = rng.standard_normal
    if name in ("add", "sub", "mul"):
        return [n((3, 4)), n((1, 4))], {}
    if name == "div":
        return [n((3, 4)), rng.uniform(0.5, 2.0, (3, 1)) * rng.choice([-1, 1], (3, 1))], {}
    if name in ("neg", "exp"):
        return [n((2, 5))], {}
    if name == "log":
        return [rng.uniform(0.2, 3.0, (2, 5))], {}
    if name == "matmul":
        return [n((3, 4)), n((4, 2))], {}
    if name == "sum":
        return [n((2, 3, 4))], {"axis": int(rng.integers(0, 3)), "keepdims": bool(rng.integers(0, 2))}
    if name == "reshape":
        return [n((2, 6))], {"shape": (3, 4)}
    if name == "transpose":
        return [n((2, 3, 4))], {"axes": tuple(rng.permutation(3))}
    if name == "logsumexp":
        return [n((3, 5))], {"axis": int(rng.integers(0, 2))}
    if name == "concat":
        return [n((2, 3)), n((2, 2))], {"axis": 1}
    if name == "conv2d":
        stride = int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        return [n((2, 2, 5, 5)), n((3, 2, k, k))], {"stride": stride, "padding": pad}
    if name == "batch_norm":
        training = bool(rng.integers(0, 2))
        kw = {"training": training}
        if not training:
            kw.update(running_mean=n(3), running_var=rng.uniform(0.5, 2.0, 3))
        return [n((4, 3, 2, 2)) * 2 + 1, rng.uniform(0.5, 1.5, 3), n(3)], kw
    if name == "relu":
        return [_away_from_zero(rng, (3, 4))], {}
    if name == "l2_normalize":
        return [n((3, 4))], {"axis": int(rng.choice([0, 1, -1]))}
    if name == "pairwise_cosine":
        return [n((4, 3)), n((5, 3))], {}
    if name == "global_avg_pool":
        return [n((2, 3, 3, 4))], {}
    raise KeyError(name)


def check_op(name: str, cases: int = 100, seed: int = 0, tol: float = 1e-4, h: float = H,
             raise_on_fail: bool = True) -> GradCheckReport:
    """Gradcheck registered op ``name`` on ``cases`` random inputs at float64."""
    fn = ops.REGISTRY[name]
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol)
    for _ in range(cases):
        arrays, kwargs = _case(name, rng)
        inputs = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
        probe_shape = fn.apply(*inputs, **_fresh(kwargs)).shape
        weights = rng.standard_normal(probe_shape)

        def f():
            return float((fn.apply(*inputs, **_fresh(kwargs)).data * weights).sum())

        out = fn.apply(*inputs, **_fresh(kwargs))
        total = (out * Tensor(weights)).sum()
        noise = noise_floor(total.item(), h)
        total.backward()
        for i, t in enumerate(inputs):
            numeric = numerical_grad(f, t.data, h)
            err, idx = relative_error(t.grad, numeric, noise)
            report.merge(name, err, idx)
    if raise_on_fail:
        report.raise_if_failed()
    return report


def _fresh(kwargs):
    # running stats are updated in place; give every evaluation its own copy
    return {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in kwargs.items()}
