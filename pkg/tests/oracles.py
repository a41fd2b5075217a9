"""Independent reference computations used by the tests."""

import itertools

import numpy as np


def chain_least_squares(means, sqrt_infos, sigma_cv, dt, weight_rows=None):
    """Dense solution of one track's linear problem with fixed components.

    means (T,3), sqrt_infos (T,3,3). Returns states (T,6) and half the squared residual.
    """
    T = len(means)
    n = 6 * T
    rows, rhs = [], []
    for t in range(T):
        S = sqrt_infos[t]
        A = np.zeros((3, n))
        A[:, 6 * t : 6 * t + 3] = S
        rows.append(A)
        rhs.append(S @ means[t])
    w = 1.0 / np.asarray(sigma_cv, float)
    for t in range(T - 1):
        A = np.zeros((6, n))
        a, b = 6 * t, 6 * (t + 1)
        for i in range(3):
            # (p_t + v_t dt - p_t1) / sigma
            A[i, a + i] = w[i]
            A[i, a + 3 + i] = dt * w[i]
            A[i, b + i] = -w[i]
            # (v_t - v_t1) / sigma
            A[3 + i, a + 3 + i] = w[3 + i]
            A[3 + i, b + 3 + i] = -w[3 + i]
        rows.append(A)
        rhs.append(np.zeros(6))
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    r = A @ x - b
    cost = 0.5 * float(r @ r)
    if weight_rows is not None:
        cost += 0.5 * float(np.sum(np.square(weight_rows)))
    return x.reshape(T, 6), cost


def enumerate_assignments(per_frame_means, S, sigma_cv, dt):
    """Every choice of one component per frame with its optimal states and cost."""
    out = []
    options = [range(len(m)) for m in per_frame_means]
    for choice in itertools.product(*options):
        means = np.array([per_frame_means[t][c] for t, c in enumerate(choice)])
        x, cost = chain_least_squares(means, np.repeat(S[None], len(means), 0), sigma_cv, dt)
        out.append((choice, x, cost))
    return out


def greedy_reference(M):
    """Plain-loop greedy assignment on a (1 + n_det, n_tracks) matrix; returns column -> row."""
    M = [list(map(float, row)) for row in M]
    n_rows, n_cols = len(M), len(M[0]) if M else 0
    alive_rows = set(range(n_rows))
    alive_cols = set(range(n_cols))
    out = {}
    while alive_cols:
        best = None
        for r in sorted(alive_rows):
            for c in sorted(alive_cols):
                if best is None or M[r][c] < best[0]:
                    best = (M[r][c], r, c)
        _, r, c = best
        out[c] = r
        alive_cols.discard(c)
        if r != 0:
            alive_rows.discard(r)
    return out
