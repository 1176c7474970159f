"""Finite-difference gradient checking against the tape.

The oracle rebuilds the graph from perturbed leaf copies and differences
the float64 objective <seed, out>, so it shares nothing with the
backward pass it is checking.
"""

import numpy as np

from nnviz import tensor as T

H = 1e-2
REL_TOL = 1e-2
ABS_TOL = 1e-3


def objective(build, leaves, seed):
    """build(tape, leaf_vars) -> out var; returns float64 <seed, out>."""
    tape = T.Tape()
    lvars = [tape.leaf(a) for a in leaves]
    out = build(tape, lvars)
    return float(np.sum(out.value.astype(np.float64) * seed))


def fd_check(build, leaves, rng, max_coords=8, h=H):
    """Compare tape gradients with central differences on sampled coords."""
    tape = T.Tape()
    lvars = [tape.leaf(a) for a in leaves]
    out = build(tape, lvars)
    seed = rng.standard_normal(out.value.shape).astype(np.float32)
    grads = T.backward(tape, out, seed, wanted=lvars)
    seed64 = seed.astype(np.float64)
    for li, leaf in enumerate(leaves):
        g = grads[lvars[li].id]
        flat = leaf.ravel()
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for ci in coords:
            plus = leaf.copy().ravel()
            plus[ci] += h
            minus = leaf.copy().ravel()
            minus[ci] -= h
            lp = [plus.reshape(leaf.shape) if j == li else leaves[j]
                  for j in range(len(leaves))]
            lm = [minus.reshape(leaf.shape) if j == li else leaves[j]
                  for j in range(len(leaves))]
            num = (objective(build, lp, seed64)
                   - objective(build, lm, seed64)) / (2 * h)
            ana = float(g.ravel()[ci])
            err = abs(num - ana)
            ok = err <= ABS_TOL or err <= REL_TOL * max(abs(num), abs(ana))
            assert ok, (f"leaf {li} coord {ci}: analytic {ana:.6g} "
                        f"vs numeric {num:.6g} (err {err:.3g})")
