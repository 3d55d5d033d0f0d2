# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import logging

import numpy as np

from .tensor import Tape
from ..errors import ContractError, NumericError

LOG = logging.getLogger(__name__)


def finite_difference_check(loss_fn, params, eps=1e-5, rel_floor=0.0):
    """Compare tape gradients of ``loss_fn(params)`` with central differences.

    Returns the worst relative error |a - n| / max(floor, |n| + |a|) over
    every entry of every parameter. Entries are perturbed in place and
    restored afterwards.

    ``floor`` is 1e-12, raised to ``rel_floor`` times the largest analytic
    entry when ``rel_floor`` is set, so entries far below the largest one
    are judged on absolute error.
    """
    if eps <= 0:
        raise ContractError(f"finite_difference_check(): eps must be > 0 (got {eps})")

    with Tape() as tape:
        loss = loss_fn(params)
        tape.backward(loss)
    analytic = []
    for p in params:
        g = tape.grad(p)
        analytic.append(np.zeros(p.shape) if g is None else g)
    gmax = max((float(np.max(np.abs(a))) for a in analytic if a.size), default=0.0)
    floor = max(1e-12, rel_floor * gmax)

    def _value():
        v = float(np.asarray(loss_fn(params).data).reshape(-1)[0])
        return v

    worst = 0.0
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        a_flat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = _value()
            flat[j] = orig - eps
            fm = _value()
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            a = a_flat[j]
            if not (np.isfinite(num) and np.isfinite(a)):
                name = p.name or f"params[{i}]"
                raise NumericError(
                    f"finite_difference_check(): non-finite gradient for {name} entry {j}",
                    name=name,
                )
            err = abs(a - num) / max(floor, abs(num) + abs(a))
            worst = max(worst, err)
    LOG.debug(f"finite_difference_check(): worst relative error={worst:.3e}")
    return worst
