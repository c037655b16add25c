"""Exact Wasserstein distances between finite atomic measures.

The transport problem is solved with the transportation simplex (MODI):
north-west corner start, potentials from the basis tree, entering arc by
most negative reduced cost, and Bland's rule once a run of degenerate pivots
shows up.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import MixingMeasure, ModelParams, PanelData

MAX_ATOMS = 256
_MASS_TOL = 1e-12


def _northwest(a, b):
    m, n = a.size, b.size
    sa, sb = a.copy(), b.copy()
    x = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        q = min(sa[i], sb[j])
        x[i, j] = q
        basis.append((i, j))
        if i == m - 1 and j == n - 1:
            break
        if sa[i] <= sb[j]:
            sb[j] -= q
            sa[i] = 0.0
            if i < m - 1:
                i += 1
            else:
                j += 1
        else:
            sa[i] -= q
            sb[j] = 0.0
            j += 1
    return x, basis


def _potentials(C, basis, m, n):
    rows = [[] for _ in range(m)]
    cols = [[] for _ in range(n)]
    for i, j in basis:
        rows[i].append(j)
        cols[j].append(i)
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    queue = deque([(0, True)])
    while queue:
        k, is_row = queue.popleft()
        if is_row:
            for j in rows[k]:
                if np.isnan(v[j]):
                    v[j] = C[k, j] - u[k]
                    queue.append((j, False))
        else:
            for i in cols[k]:
                if np.isnan(u[i]):
                    u[i] = C[i, k] - v[k]
                    queue.append((i, True))
    return u, v, rows, cols


def _tree_path(rows, cols, start_row, end_col):
    """Cells on the basis-tree path from row ``start_row`` to column ``end_col``."""
    # nodes: ('r', i) / ('c', j)
    parent = {("r", start_row): None}
    queue = deque([("r", start_row)])
    target = ("c", end_col)
    while queue:
        node = queue.popleft()
        if node == target:
            break
        kind, k = node
        nbrs = [("c", j) for j in rows[k]] if kind == "r" else [("r", i) for i in cols[k]]
        for nb in nbrs:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    path = []
    node = target
    while parent[node] is not None:
        prev = parent[node]
        cell = (prev[1], node[1]) if prev[0] == "r" else (node[1], prev[1])
        path.append(cell)
        node = prev
    path.reverse()
    return path


def transport(a, b, C, max_iter=100_000):
    """Optimal plan and cost for marginals ``a`` (rows) and ``b`` (columns)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    m, n = a.size, b.size
    if C.shape != (m, n):
        raise ValueError("cost matrix shape does not match marginals")
    if m == 1 or n == 1:
        x = np.outer(a, b) / (b.sum() if m == 1 else a.sum())
        return x, float((x * C).sum())
    x, basis = _northwest(a, b)
    scale = max(float(np.abs(C).max()), 1e-300)
    tol = 1e-12 * scale
    degenerate_run = 0
    for _ in range(max_iter):
        u, v, rows, cols = _potentials(C, basis, m, n)
        red = C - u[:, None] - v[None, :]
        for i, j in basis:
            red[i, j] = 0.0
        if degenerate_run > m + n:
            neg = np.flatnonzero(red.ravel() < -tol)
            if neg.size == 0:
                break
            flat = int(neg[0])
        else:
            flat = int(np.argmin(red))
            if red.flat[flat] >= -tol:
                break
        ei, ej = divmod(flat, n)
        path = _tree_path(rows, cols, ei, ej)
        minus = path[0::2]
        plus = path[1::2]
        vals = np.array([x[c] for c in minus])
        theta = vals.min()
        cand = [c for c, val in zip(minus, vals) if val == theta]
        leave = min(cand, key=lambda c: c[0] * n + c[1])
        for c in minus:
            x[c] -= theta
        for c in plus:
            x[c] += theta
        x[ei, ej] = theta
        x[leave] = 0.0
        basis.remove(leave)
        basis.append((ei, ej))
        degenerate_run = degenerate_run + 1 if theta == 0.0 else 0
    else:
        raise RuntimeError("transportation simplex did not converge")
    return x, float((x * C).sum())


def _check_weights(w, name):
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be a nonnegative vector")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to 1 (got {w.sum()!r})")
    return w


def wasserstein_points(X1, w1, X2, w2, q=1):
    """``W_q`` between ``sum w1_j delta(X1_j)`` and ``sum w2_h delta(X2_h)`` under Euclidean ground cost."""
    if q not in (1, 2):
        raise ValueError("order q must be 1 or 2")
    w1 = _check_weights(w1, "w1")
    w2 = _check_weights(w2, "w2")
    X1 = np.asarray(X1, dtype=float).reshape(w1.size, -1)
    X2 = np.asarray(X2, dtype=float).reshape(w2.size, -1)
    if w1.size + w2.size > MAX_ATOMS:
        raise ValueError(f"combined atom count exceeds {MAX_ATOMS}")
    k1, k2 = w1 > 0, w2 > 0
    X1, w1, X2, w2 = X1[k1], w1[k1], X2[k2], w2[k2]
    w2 = w2 * (w1.sum() / w2.sum())
    D = np.sqrt(((X1[:, None, :] - X2[None, :, :]) ** 2).sum(axis=2))
    _, cost = transport(w1, w2, D ** q)
    return max(cost, 0.0) ** (1.0 / q)


def wasserstein(m1: MixingMeasure, m2: MixingMeasure, q=1, metric="euclidean", metric_weights=(1.0, 1.0)):
    """``W_q`` between two mixing measures with ground metric on ``(alpha, sigma2)``.

    ``metric='weighted'`` uses ``sqrt(wa*dalpha**2 + ws*dsigma2**2)``.
    """
    if metric == "euclidean":
        s = np.ones(2)
    elif metric == "weighted":
        s = np.sqrt(np.asarray(metric_weights, dtype=float))
        if s.shape != (2,) or np.any(~(s > 0)):
            raise ValueError("metric weights must be two positive numbers")
    else:
        raise ValueError("metric must be 'euclidean' or 'weighted'")
    X1 = np.column_stack([m1.alpha, m1.sigma2]) * s
    X2 = np.column_stack([m2.alpha, m2.sigma2]) * s
    return wasserstein_points(X1, m1.weights, X2, m2.weights, q=q)


@dataclass(frozen=True)
class ConditionalAtoms:
    """``B[i, j]`` is the length-T location vector of atom j for unit i."""

    B: np.ndarray  # (N, K, T)
    sigma2: np.ndarray  # (K,)
    weights: np.ndarray  # (K,)

    def unit_points(self, i):
        return np.column_stack([self.B[i], self.sigma2])


def conditional_atoms(params: ModelParams, data: PanelData, mode="static") -> ConditionalAtoms:
    """Atoms pushed into outcome space given each unit's covariates (and ``y0``)."""
    T = data.T
    zb = data.Z @ params.beta if data.p else np.zeros((data.N, T))  # (N, T)
    alpha = params.alpha
    if mode == "static":
        B = alpha[None, :, None] + zb[:, None, :]
    elif mode == "dynamic":
        g = params.gamma
        if g is None or not abs(g) < 1:
            raise ValueError("dynamic conditional atoms need |gamma| < 1")
        if data.y0 is None:
            raise ValueError("dynamic conditional atoms need y0")
        gp = g ** np.arange(1, T + 1)
        # lower-triangular Toeplitz with entries gamma**(t-s)
        lag = np.arange(T)[:, None] - np.arange(T)[None, :]
        G = np.where(lag >= 0, g ** np.maximum(lag, 0), 0.0)
        carry = zb @ G.T  # (N, T)
        level = alpha[:, None] / (1.0 - g) * (1.0 - gp)[None, :]  # (K, T)
        B = level[None, :, :] + (gp[None, :] * data.y0[:, None] + carry)[:, None, :]
    else:
        raise ValueError("mode must be 'static' or 'dynamic'")
    return ConditionalAtoms(B=B, sigma2=params.sigma2.copy(), weights=params.weights.copy())


def avg_conditional_w1(params1: ModelParams, params2: ModelParams, data: PanelData, mode="static") -> float:
    """Average over units of ``W_1`` between the two conditional measures."""
    c1 = conditional_atoms(params1, data, mode)
    c2 = conditional_atoms(params2, data, mode)
    total = 0.0
    for i in range(data.N):
        total += wasserstein_points(c1.unit_points(i), c1.weights, c2.unit_points(i), c2.weights, q=1)
    return total / data.N
