"""Exact check of the truncated-rollout error bounds on an enumerated graph.

For lookahead ``l``, truncation ``m`` and terminal cost ``J_hat`` the
rollout policy is greedy with respect to ``T^(l-1) T_mu^m J_hat``. The
checked inequalities are

    (a)  ||J_rollout - J*||  <=  2 alpha^l / (1 - alpha) * ||T_mu^m J_hat - J*||
    (b)  J_rollout(y)        <=  J_mu(y) + 2 / (1 - alpha) * ||J_hat - J_mu||   for all y
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import (FeatureGraph, argmin_ties, bellman_apply, exact_policy_cost,
                    exact_value_iteration, power_policy_apply)

SLACK = 1e-9


@dataclass(frozen=True)
class BoundRow:
    lookahead: int
    steps: int
    terminal: str
    a_lhs: float
    a_rhs: float
    b_lhs: float
    b_rhs: float
    improves: bool

    @property
    def a_ok(self) -> bool:
        return self.a_lhs <= self.a_rhs + SLACK * max(1.0, self.a_rhs)

    @property
    def b_ok(self) -> bool:
        return self.b_lhs <= self.b_rhs + SLACK * max(1.0, abs(self.b_rhs))

    @property
    def ok(self) -> bool:
        return self.a_ok and self.b_ok


def rollout_policy_table(graph: FeatureGraph, base_mu, J_hat, lookahead: int, steps: int) -> np.ndarray:
    """Exact rollout policy: greedy w.r.t. ``T^(lookahead-1) T_mu^steps J_hat``."""
    if lookahead < 1:
        raise ValueError("lookahead must be >= 1")
    V = power_policy_apply(graph, base_mu, J_hat, steps)
    for _ in range(lookahead - 1):
        V = bellman_apply(graph, V)
    return argmin_ties(graph.q_values(V))


def verify_bounds(graph: FeatureGraph, base_mu, terminal_costs: dict,
                  lookaheads=(1, 2), steps=(0, 1, 2, 5), J_star=None, J_mu=None) -> list[BoundRow]:
    alpha = graph.discount
    if J_star is None:
        J_star, _ = exact_value_iteration(graph)
    if J_mu is None:
        J_mu = exact_policy_cost(graph, base_mu)
    rows = []
    for name, J_hat in terminal_costs.items():
        J_hat = np.asarray(J_hat, dtype=float)
        for ell in lookaheads:
            for m in steps:
                mu_t = rollout_policy_table(graph, base_mu, J_hat, ell, m)
                J_t = exact_policy_cost(graph, mu_t)
                W = power_policy_apply(graph, base_mu, J_hat, m)
                rows.append(BoundRow(
                    lookahead=ell, steps=m, terminal=name,
                    a_lhs=float(np.max(np.abs(J_t - J_star))),
                    a_rhs=float(2 * alpha**ell / (1 - alpha) * np.max(np.abs(W - J_star))),
                    b_lhs=float(np.max(J_t - J_mu)),
                    b_rhs=float(2 / (1 - alpha) * np.max(np.abs(J_hat - J_mu))),
                    improves=bool(np.all(J_t <= J_mu + SLACK * np.maximum(1.0, np.abs(J_mu)))),
                ))
    return rows
