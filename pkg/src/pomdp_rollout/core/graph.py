"""Enumerated feature graphs and exact dynamic programming on them.

A problem adapter provides ``discount``, ``n_controls``, ``controls(y)``,
``stage_cost(y, u)``, ``transitions(y, u) -> [(p, y_next)]`` and
``key(y)``. ``FeatureGraph.build`` closes a start set under the feature
estimator breadth-first, which is only feasible for tiny instances.
"""

from __future__ import annotations

import csv
import logging
from collections import deque

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

log = logging.getLogger(__name__)

EDGE_TOL = 1e-10
TIE_TOL = 1e-9
MAX_ITER = 10**6


class GraphNotClosed(ValueError):
    pass


class GraphTooLarge(RuntimeError):
    pass


class NotConverged(RuntimeError):
    pass


class FeatureGraph:
    """Nodes, per-control expected costs and sparse transition matrices.

    ``cost[u]`` is ``(N,)`` with NaN where ``u`` is illegal; ``P[u]`` is the
    ``(N, N)`` matrix of observation-weighted successor probabilities.
    """

    def __init__(self, nodes, cost: np.ndarray, P, discount: float, legal: np.ndarray):
        self.nodes = list(nodes)
        self.cost = np.asarray(cost, dtype=float)
        self.P = [sp.csr_matrix(m) for m in P]
        self.discount = float(discount)
        self.legal = np.asarray(legal, dtype=bool)
        n = len(self.nodes)
        if self.cost.shape != (len(self.P), n) or self.legal.shape != (n, len(self.P)):
            raise ValueError("inconsistent graph arrays")
        for u, m in enumerate(self.P):
            if m.shape != (n, n):
                raise GraphNotClosed(f"transition matrix for control {u} has shape {m.shape}")
            sums = np.asarray(m.sum(axis=1)).ravel()
            rows = self.legal[:, u]
            bad = np.flatnonzero(rows & (np.abs(sums - 1.0) > EDGE_TOL))
            if bad.size:
                raise ValueError(f"edges out of (node {bad[0]}, control {u}) sum to {sums[bad[0]]!r}")
        for arr in (self.cost, self.legal):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_controls(self) -> int:
        return len(self.P)

    @classmethod
    def build(cls, problem, starts, max_nodes: int = 100_000) -> FeatureGraph:
        index: dict = {}
        nodes: list = []
        queue: deque = deque()

        def visit(y):
            k = problem.key(y)
            if k not in index:
                if len(nodes) >= max_nodes:
                    raise GraphTooLarge(f"reachable feature graph exceeds {max_nodes} nodes")
                index[k] = len(nodes)
                nodes.append(y)
                queue.append(y)
            return index[k]

        for y in starts:
            visit(y)
        edges: dict = {}
        n_u = problem.n_controls
        while queue:
            y = queue.popleft()
            i = index[problem.key(y)]
            for u in problem.controls(y):
                succ = [(visit(y2), p) for p, y2 in problem.transitions(y, u)]
                edges[i, u] = (problem.stage_cost(y, u), succ)
        log.info("feature graph: %d nodes", len(nodes))
        return cls.from_edges(nodes, n_u, edges, problem.discount)

    @classmethod
    def from_edges(cls, nodes, n_controls: int, edges: dict, discount: float) -> FeatureGraph:
        """``edges[(node, u)] = (stage cost, [(successor index, probability), ...])``."""
        nodes = list(nodes) if not isinstance(nodes, int) else list(range(nodes))
        n = len(nodes)
        cost = np.full((n_controls, n), np.nan)
        legal = np.zeros((n, n_controls), dtype=bool)
        P = [sp.lil_matrix((n, n)) for _ in range(n_controls)]
        for (i, u), (g, succ) in edges.items():
            cost[u, i] = g
            legal[i, u] = True
            for j, p in succ:
                if not 0 <= j < n:
                    raise GraphNotClosed(f"successor {j} of (node {i}, control {u}) is not a node")
                P[u][i, j] += p
        missing = np.flatnonzero(~legal.any(axis=1))
        if missing.size:
            raise GraphNotClosed(f"node {missing[0]} has no outgoing control")
        return cls(nodes, cost, [m.tocsr() for m in P], discount, legal)

    # operators -----------------------------------------------------------
    def _check(self, J) -> np.ndarray:
        J = np.asarray(J, dtype=float)
        if J.shape != (self.n_nodes,):
            raise GraphNotClosed(f"table has {J.shape} entries, graph has {self.n_nodes} nodes")
        return J

    def q_values(self, J) -> np.ndarray:
        """``(N, U)`` matrix of ``(T_u J)(y)``, ``+inf`` for illegal controls."""
        J = self._check(J)
        q = np.full((self.n_nodes, self.n_controls), np.inf)
        for u in range(self.n_controls):
            rows = self.legal[:, u]
            q[rows, u] = self.cost[u, rows] + self.discount * (self.P[u] @ J)[rows]
        return q

    def policy_matrix(self, mu):
        mu = np.asarray(mu, dtype=np.int64)
        if mu.shape != (self.n_nodes,):
            raise ValueError("policy must assign one control per node")
        if not np.all(self.legal[np.arange(self.n_nodes), mu]):
            bad = int(np.flatnonzero(~self.legal[np.arange(self.n_nodes), mu])[0])
            raise ValueError(f"policy uses illegal control {mu[bad]} at node {bad}")
        g = self.cost[mu, np.arange(self.n_nodes)]
        P = sp.csr_matrix((self.n_nodes, self.n_nodes))
        for u in range(self.n_controls):
            rows = sp.diags((mu == u).astype(float))
            P = P + rows @ self.P[u]
        return g, P.tocsr()


def argmin_ties(q: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmin treating values within ``tol * max(1, |min|)`` as ties (lowest index wins)."""
    best = q.min(axis=1, keepdims=True)
    slack = tol * np.maximum(1.0, np.abs(best))
    return np.argmax(q <= best + slack, axis=1)


def bellman_policy_apply(graph: FeatureGraph, mu, J) -> np.ndarray:
    """``(T_mu J)(y) = g(y, mu(y)) + alpha sum_z p(z | b_y, mu(y)) J(F(y, mu(y), z))``."""
    J = graph._check(J)
    g, P = graph.policy_matrix(mu)
    return g + graph.discount * (P @ J)


def bellman_apply(graph: FeatureGraph, J, return_policy: bool = False):
    q = graph.q_values(J)
    mu = argmin_ties(q)
    TJ = q[np.arange(graph.n_nodes), mu]
    return (TJ, mu) if return_policy else TJ


def exact_value_iteration(graph: FeatureGraph, tol: float = 1e-10, J0=None,
                          max_iter: int = MAX_ITER):
    """Iterate ``J <- TJ`` until ``||TJ - J|| <= tol``; returns ``(J*, mu*)``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    log.info("value iteration on %d nodes", graph.n_nodes)
    J = np.zeros(graph.n_nodes) if J0 is None else graph._check(J0).copy()
    for _ in range(max_iter):
        TJ, mu = bellman_apply(graph, J, return_policy=True)
        if np.max(np.abs(TJ - J), initial=0.0) <= tol:
            _, mu = bellman_apply(graph, TJ, return_policy=True)
            return TJ, mu
        J = TJ
    raise NotConverged(f"value iteration did not reach tol={tol} in {max_iter} iterations")


def exact_policy_cost(graph: FeatureGraph, mu, tol: float = 1e-10, max_iter: int = MAX_ITER) -> np.ndarray:
    """Fixed point of ``T_mu``: sparse direct solve, then fixed-point polishing to ``tol``."""
    g, P = graph.policy_matrix(mu)
    A = sp.identity(graph.n_nodes, format="csc") - graph.discount * P.tocsc()
    J = np.atleast_1d(spsolve(A, g))
    for _ in range(max_iter):
        TJ = g + graph.discount * (P @ J)
        if np.max(np.abs(TJ - J), initial=0.0) <= tol:
            return TJ
        J = TJ
    raise NotConverged(f"policy evaluation did not reach tol={tol}")


def power_policy_apply(graph: FeatureGraph, mu, J, m: int) -> np.ndarray:
    """``T_mu^m J``."""
    g, P = graph.policy_matrix(mu)
    J = graph._check(J)
    for _ in range(m):
        J = g + graph.discount * (P @ J)
    return J


def write_table_csv(path, values, header=("node", "value")) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, v in enumerate(values):
            writer.writerow([i, repr(float(v)) if isinstance(v, (float, np.floating)) else v])


def write_graph_csv(path, graph: FeatureGraph, describe=repr) -> None:
    """One row per (node, control, successor) edge plus the node description."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "control", "stage_cost", "successor", "probability", "state"])
        for u, m in enumerate(graph.P):
            coo = m.tocoo()
            for i, j, p in sorted(zip(coo.row, coo.col, coo.data)):
                writer.writerow([i, u, repr(float(graph.cost[u, i])), j, repr(float(p)),
                                 describe(graph.nodes[i])])
