"""Stochastic graph structure evolution.

A proposal merges nodes by selecting each edge independently with its
predicted merging probability. The acceptance rate is min(1, transition
ratio x posterior ratio), where the transition ratio multiplies the
merging probabilities of all eliminated edges and the posterior ratio
compares task losses under a Gibbs model. During testing only the
transition ratio is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from operator import itemgetter

import numpy as np

from sevolve.graph import (
    CliquePartition,
    LevelGraph,
    _components_canonical,
    quotient_graph,
)

MODES = ("train", "test")


@dataclass
class EvolveConfig:
    """Settings for one structure-evolution step.

    `threshold` switches to the deterministic ablation: edges with
    probability >= threshold merge, no sampling and no acceptance loop.
    `loss_floor`, when set, promises that loss_eval never returns less
    than this value; it tightens the bound used to skip posterior
    evaluations that cannot change a trial's outcome.
    """

    max_trials: int = 50
    mode: str = "train"
    threshold: float | None = None
    loss_floor: float | None = None

    def __post_init__(self):
        if self.max_trials < 1:
            raise ValueError(f"max_trials must be >= 1, got {self.max_trials}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.threshold is not None and not (0.0 < self.threshold <= 1.0):
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")


class ProposalTrace:
    """Record of one sampling trial (or one deterministic selection).

    The candidate partition, the eliminated edges, the transition ratio,
    and alpha are materialized lazily from the recorded selection when a
    trial was decided from bounds alone (rejections mostly are); accessing
    any of them computes exactly the values the eager path would have.

    When `posterior_evaluated` is False the trial was rejected without
    calling the loss callback: the acceptance draw exceeded the largest
    alpha any admissible posterior ratio could produce (bounded by the
    exponent clamp and, when configured, the loss floor), so
    `posterior_ratio` and `alpha` hold that upper bound instead of
    evaluated values. The accept/reject decision is identical either way.
    """

    __slots__ = ("trial", "posterior_ratio", "accepted", "posterior_evaluated",
                 "_g", "_probs", "_sel_idx", "_selected", "_partition",
                 "_elim_idx", "_eliminated", "_t_ratio", "_alpha")

    def __init__(self, trial, g, probs, sel_idx, posterior_ratio, accepted,
                 posterior_evaluated=True, partition=None, elim_idx=None,
                 transition_ratio=None, selected=None, alpha=None):
        self.trial = trial
        self._g = g
        self._probs = probs
        self._sel_idx = sel_idx
        self._selected = selected
        self._partition = partition
        self._elim_idx = elim_idx
        self._eliminated = None
        self._t_ratio = transition_ratio
        self._alpha = alpha
        self.posterior_ratio = posterior_ratio
        self.accepted = accepted
        self.posterior_evaluated = posterior_evaluated

    @property
    def selected(self) -> tuple:
        if self._selected is None or not isinstance(self._selected, tuple):
            edges = self._g.edges
            self._selected = tuple(edges[i] for i in self._sel_idx)
        return self._selected

    @property
    def partition(self) -> CliquePartition:
        if self._partition is None:
            self._partition = _components_canonical(self._g, self.selected)
        return self._partition

    @property
    def num_cliques(self) -> int:
        return self.partition.num_cliques

    @property
    def _eliminated_idx(self):
        if self._elim_idx is None:
            self._elim_idx = np.nonzero(_intra_clique_mask(self._g, self.partition))[0]
        return self._elim_idx

    @property
    def eliminated(self) -> tuple:
        if self._eliminated is None:
            edges = self._g.edges
            self._eliminated = tuple(edges[i] for i in self._eliminated_idx)
        return self._eliminated

    @property
    def transition_ratio(self) -> float:
        if self._t_ratio is None:
            self._t_ratio = _eliminated_product(self._probs, self._eliminated_idx)
        return self._t_ratio

    @property
    def alpha(self) -> float:
        if self._alpha is None:
            self._alpha = min(1.0, self.transition_ratio * self.posterior_ratio)
        return self._alpha

    def __repr__(self):
        return (f"ProposalTrace(trial={self.trial}, selected={len(self._sel_idx)}, "
                f"alpha={self.alpha!r}, accepted={self.accepted})")


def _validated_probs(g: LevelGraph, edge_probs) -> np.ndarray:
    probs = np.asarray(edge_probs, dtype=np.float64)
    if probs.shape != (g.num_edges,):
        raise ValueError(
            f"need one probability per edge ({g.num_edges}), got shape {probs.shape}")
    if probs.size and not (probs.min() >= 0.0 and probs.max() <= 1.0):
        raise ValueError("edge merging probabilities must lie in [0, 1]")
    return probs


def _propose_partition(g: LevelGraph, probs: np.ndarray, rng):
    # selected edges come straight from the canonical edge tuple, so the
    # validation-free component core applies
    draws = rng.random(probs.size)
    idx = np.nonzero(draws < probs)[0]
    edges = g.edges
    if idx.size > 1:
        selected = list(itemgetter(*idx)(edges))
    elif idx.size:
        selected = [edges[idx[0]]]
    else:
        selected = []
    return selected, _components_canonical(g, selected)


def propose(g: LevelGraph, edge_probs, rng):
    """Sample one candidate coarsening.

    Each edge is selected independently with its merging probability,
    using exactly one uniform draw per edge in canonical edge order
    (a single rng.random(num_edges) call). Returns (selected_edges,
    partition, coarsened_graph).
    """
    selected, part = _propose_partition(g, _validated_probs(g, edge_probs), rng)
    return selected, part, quotient_graph(g, part)


def _intra_clique_mask(g: LevelGraph, partition: CliquePartition) -> np.ndarray:
    if partition.num_nodes != g.num_nodes:
        raise ValueError("partition does not cover the graph's nodes")
    if not g.num_edges:
        return np.zeros(0, dtype=bool)
    ea = g.edge_array()
    assign = partition.assignment
    return assign[ea[:, 0]] == assign[ea[:, 1]]


def _eliminated_product(probs: np.ndarray, elim_idx: np.ndarray) -> float:
    p_elim = probs[elim_idx]
    if not p_elim.size:
        return 1.0
    if p_elim.min() == 0.0:
        return 0.0
    return float(math.exp(np.log(p_elim).sum()))


def transition_ratio(g: LevelGraph, partition: CliquePartition, edge_probs) -> float:
    """Product of merging probabilities over the eliminated edges, i.e.
    the edges of `g` whose endpoints fall into the same clique. Empty
    product is 1. Accumulated in log space to avoid underflow."""
    probs = _validated_probs(g, edge_probs)
    return _eliminated_product(probs, np.nonzero(_intra_clique_mask(g, partition))[0])


def posterior_ratio(loss_old: float, loss_new: float) -> float:
    """exp(loss_old - loss_new): the Gibbs posterior ratio of the candidate
    graph to the current one (partition function cancels). The exponent is
    clamped to +-50, which preserves ordering while preventing overflow."""
    if not (math.isfinite(loss_old) and math.isfinite(loss_new)):
        raise ValueError(f"losses must be finite, got {loss_old}, {loss_new}")
    return math.exp(min(50.0, max(-50.0, loss_old - loss_new)))


def evolve_step(g: LevelGraph, edge_probs, loss_eval, cfg: EvolveConfig, rng):
    """Metropolis-Hastings search for the next-level graph.

    Proposes up to cfg.max_trials candidate coarsenings and accepts one
    with probability alpha = min(1, transition_ratio * posterior_ratio).
    In test mode the posterior ratio is fixed to 1 and `loss_eval` is
    never called; in train mode `loss_eval(partition, graph)` must return
    the task loss under the coarsening `partition` of the source `graph`
    (the candidate graph itself is quotient_graph(graph, partition)). If
    no candidate is accepted the graph is kept unchanged with the
    identity partition.

    Returns (next_graph, partition, list of ProposalTrace).
    """
    probs = _validated_probs(g, edge_probs)
    test_mode = cfg.mode == "test"
    if not test_mode and loss_eval is None:
        raise ValueError("train mode requires a loss_eval callback")
    ratio_cap = 1.0
    loss_old = None
    if not test_mode:
        loss_old = float(loss_eval(CliquePartition.identity(g.num_nodes), g))
        if cfg.loss_floor is not None:
            ratio_cap = posterior_ratio(loss_old, cfg.loss_floor)
        else:
            ratio_cap = math.exp(50.0)  # ceiling the exponent clamp allows
    m = probs.size
    traces = []
    for trial in range(1, cfg.max_trials + 1):
        draws = rng.random(m)
        sel_idx = np.nonzero(draws < probs)[0]
        # every selected edge ends up intra-clique, so the product over
        # the selected edges bounds the transition ratio from above
        if sel_idx.size:
            t_upper = float(math.exp(np.log(probs[sel_idx]).sum()))
        else:
            t_upper = 1.0
        draw = rng.random()
        if draw >= t_upper * ratio_cap:
            # rejected under every admissible transition/posterior value;
            # partition, ratios, and alpha materialize lazily on access
            traces.append(ProposalTrace(
                trial, g, probs, sel_idx,
                posterior_ratio=ratio_cap if not test_mode else 1.0,
                accepted=False, posterior_evaluated=test_mode))
            continue
        edges = g.edges
        if sel_idx.size > 1:
            selected = list(itemgetter(*sel_idx)(edges))
        elif sel_idx.size:
            selected = [edges[sel_idx[0]]]
        else:
            selected = []
        part = _components_canonical(g, selected)
        elim_idx = np.nonzero(_intra_clique_mask(g, part))[0]
        t_ratio = _eliminated_product(probs, elim_idx)
        evaluated = True
        if test_mode:
            p_ratio = 1.0
        elif draw >= t_ratio * ratio_cap:
            # the exact transition ratio already rules this draw out
            p_ratio = ratio_cap
            evaluated = False
        else:
            p_ratio = posterior_ratio(loss_old, float(loss_eval(part, g)))
        alpha = min(1.0, t_ratio * p_ratio)
        accepted = draw < alpha
        traces.append(ProposalTrace(
            trial, g, probs, sel_idx, posterior_ratio=p_ratio,
            accepted=accepted, posterior_evaluated=evaluated,
            partition=part, elim_idx=elim_idx, transition_ratio=t_ratio,
            selected=selected))
        if accepted:
            return quotient_graph(g, part), part, traces
    return g, CliquePartition.identity(g.num_nodes), traces


def evolve_deterministic(g: LevelGraph, edge_probs, threshold: float):
    """Hard-threshold ablation: merge exactly the edges with merging
    probability >= threshold. No sampling, no acceptance loop.

    Returns (next_graph, partition, list with one ProposalTrace).
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    probs = _validated_probs(g, edge_probs)
    sel_idx = np.nonzero(probs >= threshold)[0]
    selected = [g.edges[i] for i in sel_idx]
    part = _components_canonical(g, selected)
    coarse = quotient_graph(g, part)
    elim_idx = np.nonzero(_intra_clique_mask(g, part))[0]
    t_ratio = _eliminated_product(probs, elim_idx)
    trace = ProposalTrace(1, g, probs, sel_idx, posterior_ratio=1.0,
                          accepted=True, partition=part, elim_idx=elim_idx,
                          transition_ratio=t_ratio, selected=selected, alpha=1.0)
    return coarse, part, [trace]


def trace_records(traces) -> list[str]:
    """Line-delimited dump of proposal trials, one line per trial."""
    lines = []
    for t in traces:
        lines.append(
            f"trial={t.trial} selected={len(t.selected)} "
            f"transition_ratio={t.transition_ratio!r} "
            f"posterior_ratio={t.posterior_ratio!r} "
            f"alpha={t.alpha!r} accepted={int(t.accepted)}")
    if traces and not traces[-1].accepted:
        lines.append("fallback=identity")
    return lines
