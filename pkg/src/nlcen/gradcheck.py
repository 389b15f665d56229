"""Compare reverse-mode gradients against central finite differences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, grad


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    passed: bool
    n_checked: int

    def __str__(self) -> str:
        flag = "pass" if self.passed else "FAIL"
        return f"{flag}: max_abs={self.max_abs_error:.3e} max_rel={self.max_rel_error:.3e} over {self.n_checked} entries"


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Check ``d f() / d inputs`` element-wise.

    ``f`` takes no arguments and reads the current values of ``inputs``,
    which are perturbed in place and restored.  An entry passes when its
    relative error is below ``tol``; where the numerical gradient is
    smaller than ``step`` in magnitude the absolute error must instead be
    below ``10 * step**2`` plus the round-off floor of the difference
    quotient, ``64 * machine_eps * max(1, |f|) / step``.

    ``max_per_input`` limits the check to a random subset of entries per
    input tensor (chosen with ``rng``), for large models.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = list(inputs)
    out = f()
    if out.size != 1:
        raise ValueError(f"f must return a scalar, got shape {out.shape}")
    again = f()
    if again.data.tobytes() != out.data.tobytes():
        raise NonDeterministicError(
            f"f is not deterministic: {out.item()!r} then {again.item()!r}"
        )
    analytic = grad(out, inputs)
    rng = rng or np.random.default_rng(0)
    atol = 10.0 * step * step + 64.0 * np.finfo(np.float64).eps * max(1.0, abs(out.item())) / step

    max_abs = 0.0
    max_rel = 0.0
    ok = True
    n = 0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            idx = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(gflat[i] - num)
            max_abs = max(max_abs, err)
            if abs(num) < step:
                ok &= err < atol
            else:
                rel = err / max(abs(num), abs(gflat[i]))
                max_rel = max(max_rel, rel)
                ok &= rel < tol
            n += 1
    return GradCheckReport(max_abs, max_rel, bool(ok), n)


def numerical_grad(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``t``."""
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(t.shape)
