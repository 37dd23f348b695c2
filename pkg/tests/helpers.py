"""Shared oracles for the test suite."""

import numpy as np


def numeric_grads(f, nets, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every parameter of ``nets``."""
    out = []
    for net in nets:
        grads = []
        for p in net.params:
            g = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                k = it.multi_index
                old = p[k]
                p[k] = old + h
                fp = f()
                p[k] = old - h
                fm = f()
                p[k] = old
                g[k] = (fp - fm) / (2 * h)
            grads.append(g)
        out.append(grads)
    return out


def max_rel_error(analytic, numeric, floor=1e-7):
    """Largest |a - n| / max(|a| + |n|, floor) over all entries."""
    worst = 0.0
    for a_list, n_list in zip(analytic, numeric):
        for a, n in zip(a_list, n_list):
            err = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
            worst = max(worst, float(err.max()))
    return worst


def block_matrix(sizes, within, across):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    d = np.where(labels[:, None] == labels[None, :], within, across).astype(float)
    np.fill_diagonal(d, 0.0)
    return d, labels
