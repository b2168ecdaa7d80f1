"""Shared test utilities: deterministic random model generation.

Models are drawn in Jordan coordinates directly so every sample satisfies
the structural requirements by construction: block-diagonal A with 0/1
superdiagonals, distinct block eigenvalues bounded away from zero, PSD
process/initial covariances, PD measurement covariance, exact zero
patterns in C so sensor coverage is unambiguous.
"""

import numpy as np

from securekf.model import SystemModel


def random_jordan_model(seed, n_max=5, m_max=8, ensure_observable=False):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, n_max + 1))

    sizes = []
    left = n
    while left > 0:
        size = int(rng.integers(1, min(3, left) + 1))
        sizes.append(size)
        left -= size

    # distinct eigenvalues away from zero; separation keeps rank tests clean
    lams = []
    while len(lams) < len(sizes):
        lam = float(rng.uniform(0.15, 1.6)) * (1 if rng.random() < 0.7 else -1)
        if all(abs(lam - other) > 0.05 for other in lams):
            lams.append(lam)

    A = np.zeros((n, n))
    starts = []
    pos = 0
    for size, lam in zip(sizes, lams):
        starts.append(pos)
        for k in range(size):
            A[pos + k, pos + k] = lam
            if k + 1 < size:
                A[pos + k, pos + k + 1] = 1.0
        pos += size

    m = int(rng.integers(1, m_max + 1))
    C = np.zeros((m, n))
    for i in range(m):
        for b, (start, size) in enumerate(zip(starts, sizes)):
            u = rng.random()
            if u < 0.55:
                # full coverage of the chain: nonzero at its first state
                C[i, start] = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])
                extra = rng.random(size) < 0.3
                C[i, start:start + size][extra] += rng.normal(0, 1, extra.sum())
            elif u < 0.7 and size > 1:
                # partial coverage: first nonzero entry sits deeper in the chain
                t = int(rng.integers(1, size))
                C[i, start + t] = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])

    if ensure_observable:
        for start in starts:
            if not np.any(C[:, start] != 0.0):
                i = int(rng.integers(0, m))
                C[i, start] = rng.uniform(0.5, 2.0)

    L = rng.normal(0, 0.1, (n, n))
    Q = L @ L.T
    M = rng.normal(0, 0.1, (m, m))
    R = M @ M.T + 0.01 * np.eye(m)
    Ls = rng.normal(0, 0.1, (n, n))
    Sigma = Ls @ Ls.T
    return SystemModel(A=A, C=C, Q=Q, R=R, Sigma=Sigma)
