"""Random estimator instances shared by the ib tests and the acceptance suite."""

import numpy as np

from ltmerge import ib


def simplex_rows(rng, n, C, scale=1.5):
    z = rng.normal(scale=scale, size=(n, C))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def bound_instance(rng):
    """n in [4, 32], C in [2, 4], P*D <= 16, every class present."""
    C = int(rng.integers(2, 5))
    n = int(rng.integers(max(4, C), 33))
    P = int(rng.integers(1, 5))
    D = int(rng.integers(1, 16 // P + 1))
    merged = rng.normal(size=(n, P * D))
    centroids = rng.normal(size=(C, P * D))
    phi_t = ib.soft_assign(merged, centroids)
    phi_x = simplex_rows(rng, n, C)
    labels = np.concatenate([np.arange(C), rng.integers(0, C, n - C)])
    rng.shuffle(labels)
    Q_rand = simplex_rows(rng, C, C).T
    return dict(phi_t=phi_t, phi_x=phi_x, labels=labels, C=C, Q_fit=ib.update_Q(phi_t, labels, C),
                Q_rand=Q_rand)
