"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, no_tape


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, coords, h: float = 1e-5) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.empty(len(coords))
    with no_tape():
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            out[k] = (fp - fm) / (2.0 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_coords: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` closes over ``inputs`` and returns a scalar tensor. The error for
    each input is ``max|analytic - numeric| / max(max|numeric|, max|analytic|)``
    over the checked coordinates, with the denominator floored at ``floor`` so
    gradients that are zero up to roundoff (e.g. a bias cancelled by a
    softmax) do not produce 0/0; the worst input is reported. When
    ``max_coords`` is given, that many coordinates per input are sampled.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradcheck needs real64 inputs")
        x.requires_grad = True
    with Tape() as tape:
        loss = fn()
    analytic = tape.backward(loss, wrt=list(inputs))
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        n = x.data.size
        if max_coords is not None and n > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        gn = numeric_grad(fn, x, coords, h)
        ga = ga.reshape(-1)[coords]
        scale = max(np.abs(gn).max(initial=0.0), np.abs(ga).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(ga - gn).max() / scale))
    return worst
