"""Stacked graph LSTM layers over an evolving hierarchy of graphs.

One forward pass runs L layers. Layer t propagates cell state over graph
G_t in a random node visit order, applies a per-level linear head to the
node hidden states, and (except after the last layer) coarsens the graph
by a Metropolis-Hastings step driven by the predicted per-edge merging
probabilities. States of merged nodes are averaged to seed the next
level. All layers share one set of cell weights. The base-level
prediction is the element-wise sum of every level's logits broadcast
back to the base nodes.

The backward pass reverses the realized structure exactly: heads, then
layers in reverse, nodes in reverse visit order, with aggregated-state
gradients split uniformly over merged members. No gradient flows through
the discrete merge decisions; the edge-supervision loss trains the
merge-probability readout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from sevolve.cell import CellParams, cell_forward
from sevolve.evolve import EvolveConfig, evolve_deterministic, evolve_step
from sevolve.graph import (
    CliquePartition,
    HierarchyTrace,
    LevelGraph,
    aggregate_node_values,
    quotient_graph,
)

MODES = ("train", "test")


@dataclass
class NetworkConfig:
    input_dim: int
    num_classes: int
    num_layers: int = 5
    hidden_dim: int | None = None
    edge_loss_weight: float = 1.0
    evolve: EvolveConfig = field(default_factory=EvolveConfig)

    def __post_init__(self):
        if self.hidden_dim is None:
            self.hidden_dim = self.input_dim
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be positive")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.edge_loss_weight < 0:
            raise ValueError("edge_loss_weight must be >= 0")


class ModelParams:
    """One shared CellParams plus per-level linear heads (C x H, C)."""

    __slots__ = ("cell", "heads")

    def __init__(self, cell: CellParams, heads):
        self.cell = cell
        self.heads = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                      for w, b in heads]
        for k, (w, b) in enumerate(self.heads):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"head {k} has inconsistent shapes {w.shape}, {b.shape}")
            if w.shape[1] != cell.hidden_dim:
                raise ValueError(f"head {k} does not match hidden_dim {cell.hidden_dim}")

    @property
    def num_layers(self) -> int:
        return len(self.heads)

    def tensors(self):
        """(name, array) pairs: the shared cell block, then each head."""
        out = self.cell.tensors()
        for k, (w, b) in enumerate(self.heads):
            out.append((f"head{k}_w", w))
            out.append((f"head{k}_b", b))
        return out

    def zeros_like(self) -> "ModelParams":
        heads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.heads]
        return ModelParams(self.cell.zeros_like(), heads)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cell.copy(), [(w.copy(), b.copy()) for w, b in self.heads])


def init_params(cfg: NetworkConfig, rng) -> ModelParams:
    """Cell weights uniform on [-0.1, 0.1]; head weights Gaussian with
    standard deviation 0.001; all biases zero. Draw order follows the
    canonical tensor enumeration."""
    cell = CellParams(cfg.input_dim, cfg.hidden_dim)
    for _, t in cell.tensors():
        t[...] = rng.uniform(-0.1, 0.1, t.shape)
    heads = []
    for _ in range(cfg.num_layers):
        w = rng.normal(0.0, 0.001, (cfg.num_classes, cfg.hidden_dim))
        b = np.zeros(cfg.num_classes)
        heads.append((w, b))
    return ModelParams(cell, heads)


class Sample:
    """A base graph with per-node feature vectors and class labels.

    Per-edge merge targets (1 iff the endpoints share a label) are derived
    on construction, in canonical edge order.
    """

    __slots__ = ("graph", "features", "labels", "edge_targets")

    def __init__(self, graph: LevelGraph, features, labels):
        feats = np.ascontiguousarray(features, dtype=np.float64)
        lbls = np.asarray(labels, dtype=np.intp)
        if feats.ndim != 2 or feats.shape[0] != graph.num_nodes:
            raise ValueError(
                f"features must be (num_nodes, D), got {feats.shape} for "
                f"{graph.num_nodes} nodes")
        if lbls.shape != (graph.num_nodes,):
            raise ValueError("labels must cover every node")
        if not np.isfinite(feats).all():
            raise ValueError("non-finite feature values")
        if lbls.size and lbls.min() < 0:
            raise ValueError("labels must be non-negative")
        self.graph = graph
        self.features = feats
        self.labels = lbls
        if graph.num_edges:
            ea = graph.edge_array()
            self.edge_targets = (lbls[ea[:, 0]] == lbls[ea[:, 1]]).astype(np.float64)
        else:
            self.edge_targets = np.zeros(0)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


@dataclass
class StructurePlan:
    """Frozen structure of one forward pass: per-layer node visit orders
    and the realized partitions. Replaying a plan makes the forward pass
    a deterministic, rng-free function of the parameters."""

    visit_orders: list
    partitions: list


class _LayerBook:
    """Per-layer bookkeeping needed by the backward pass."""

    __slots__ = ("nbr_idx", "offsets", "ia", "ib", "caches", "order",
                 "inputs", "h_prev", "m_prev", "hidden", "memory")


class ForwardResult:
    """Everything one forward pass produced: per-level logits and edge
    probabilities, the realized hierarchy trace, the combined base-level
    logits, and the caches for the backward pass."""

    __slots__ = ("mode", "params", "level_logits", "combined_logits", "trace",
                 "amaps", "layers")

    @property
    def level_edge_probs(self):
        return self.trace.edge_probs

    def plan(self) -> StructurePlan:
        return StructurePlan(
            visit_orders=[bk.order for bk in self.layers],
            partitions=list(self.trace.partitions))


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _mean_cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def _directed_slots(g: LevelGraph):
    """Index arrays mapping each canonical edge to its two directed
    merge-probability slots in the concatenation of per-node outputs."""
    adj = g.adjacency
    degrees = np.array([len(nb) for nb in adj], dtype=np.intp)
    offsets = np.zeros(g.num_nodes, dtype=np.intp)
    if g.num_nodes > 1:
        offsets[1:] = np.cumsum(degrees)[:-1]
    eidx = g.edge_index()
    m = g.num_edges
    ia = np.zeros(m, dtype=np.intp)
    ib = np.zeros(m, dtype=np.intp)
    for i, nb in enumerate(adj):
        base = offsets[i]
        for s, j in enumerate(nb):
            if i < j:
                ia[eidx[(i, j)]] = base + s
            else:
                ib[eidx[(j, i)]] = base + s
    return offsets, degrees, ia, ib


def _make_loss_eval(node_logits, amap, labels):
    # Candidate-graph energy for the Gibbs posterior: current-level hidden
    # states averaged over the candidate cliques, pushed through the
    # current level's head, broadcast to the base nodes, scored with the
    # same mean cross-entropy convention as the task loss. The head is
    # linear, so averaging the per-node logits over each clique gives the
    # same values.
    def loss_eval(partition, graph):
        agg = aggregate_node_values(partition, node_logits)
        return _mean_cross_entropy(agg[partition.assignment[amap]], labels)

    return loss_eval


def forward(sample: Sample, params: ModelParams, cfg: NetworkConfig,
            rng=None, mode: str = "train", plan: StructurePlan | None = None) -> ForwardResult:
    """Run the full stack on one sample.

    In train mode the evolution step may query the label-dependent
    posterior; in test mode acceptance uses the transition ratio alone and
    labels are never read. Passing a StructurePlan replays a recorded
    structure (visit orders + partitions) with no rng involved.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if plan is None and rng is None:
        raise ValueError("rng is required when no replay plan is given")
    d_in, h_dim, n_cls, n_layers = (cfg.input_dim, cfg.hidden_dim,
                                    cfg.num_classes, cfg.num_layers)
    if sample.features.shape[1] != d_in:
        raise ValueError(
            f"sample features have dim {sample.features.shape[1]}, config says {d_in}")
    if params.cell.input_dim != d_in or params.cell.hidden_dim != h_dim:
        raise ValueError("cell parameter dimensions do not match the config")
    if params.num_layers != n_layers:
        raise ValueError(
            f"params carry {params.num_layers} heads, config says {n_layers}")
    labels = sample.labels
    if mode == "train" and labels.max() >= n_cls:
        raise ValueError(f"label {labels.max()} out of range for {n_cls} classes")
    if plan is not None and (len(plan.visit_orders) != n_layers
                             or len(plan.partitions) != n_layers - 1):
        raise ValueError("replay plan does not match the layer count")

    g = sample.graph
    feats = sample.features
    h_prev = np.zeros((g.num_nodes, h_dim))
    m_prev = np.zeros((g.num_nodes, h_dim))
    amap = np.arange(g.num_nodes, dtype=np.intp)
    zero_h = np.zeros(h_dim)

    levels = [g]
    partitions = []
    edge_probs = []
    decisions = []
    level_logits = []
    amaps = []
    layers = []

    cell = params.cell
    hh = h_dim
    for t in range(n_layers):
        n = g.num_nodes
        adj = g.adjacency
        nbr_idx = [np.asarray(nb, dtype=np.intp) for nb in adj]
        order = plan.visit_orders[t] if plan is not None else rng.permutation(n)
        visited = np.zeros(n, dtype=bool)
        h_new = np.zeros((n, h_dim))
        m_new = np.zeros((n, h_dim))
        caches = [None] * n
        dir_probs = [None] * n
        # visit-order independent pre-activations, batched for the layer
        pre_static = feats @ cell.wx.T + h_prev @ cell.uh.T + cell.b
        forget_base = feats @ cell.wx[hh:2 * hh].T + cell.b[hh:2 * hh]
        nbr_base = h_prev @ cell.u_fn.T
        for i in order:
            idx = nbr_idx[i]
            if idx.size:
                vis = visited.take(idx)
                hp_rows = h_prev.take(idx, axis=0)
                mp_rows = m_prev.take(idx, axis=0)
                any_vis = vis.any()
                if any_vis:
                    hn_rows = h_new.take(idx, axis=0)
                    mc_rows = m_new.take(idx, axis=0)
                    navg = np.where(vis[:, None], hn_rows, hp_rows).sum(axis=0) / idx.size
                else:
                    mc_rows = mp_rows
                    navg = hp_rows.sum(axis=0) / idx.size
                hid, mem, probs_i, cache = cell_forward(
                    cell, feats[i], h_prev[i], m_prev[i], navg,
                    vis, hp_rows, mc_rows, mp_rows,
                    pre_static=pre_static[i],
                    nbr_pre=forget_base[i] + nbr_base.take(idx, axis=0))
            else:
                hid, mem, probs_i, cache = cell_forward(
                    cell, feats[i], h_prev[i], m_prev[i], zero_h,
                    pre_static=pre_static[i])
            h_new[i] = hid
            m_new[i] = mem
            caches[i] = cache
            dir_probs[i] = probs_i
            visited[i] = True

        offsets, degrees, ia, ib = _directed_slots(g)
        if g.num_edges:
            flat = np.concatenate(dir_probs)
            # one probability per undirected edge: mean of the two
            # directed evaluations
            p_edge = 0.5 * (flat[ia] + flat[ib])
        else:
            p_edge = np.zeros(0)
        head_w, head_b = params.heads[t]
        logits = h_new @ head_w.T + head_b

        book = _LayerBook()
        book.nbr_idx = nbr_idx
        book.offsets = offsets
        book.ia = ia
        book.ib = ib
        book.caches = caches
        book.order = order
        book.inputs = feats
        book.h_prev = h_prev
        book.m_prev = m_prev
        book.hidden = h_new
        book.memory = m_new
        layers.append(book)
        level_logits.append(logits)
        edge_probs.append(p_edge)
        amaps.append(amap)

        if t < n_layers - 1:
            if plan is not None:
                part = plan.partitions[t]
                g_next = quotient_graph(g, part)
                trial_log = []
            elif cfg.evolve.threshold is not None:
                g_next, part, trial_log = evolve_deterministic(
                    g, p_edge, cfg.evolve.threshold)
            else:
                # the posterior energy is a sum of cross-entropies, so 0
                # is a valid floor for the evaluation-skipping bound
                ecfg = replace(cfg.evolve, mode=mode, threshold=None, loss_floor=0.0)
                loss_eval = None
                if mode == "train":
                    loss_eval = _make_loss_eval(logits, amap, labels)
                g_next, part, trial_log = evolve_step(g, p_edge, loss_eval, ecfg, rng)
            partitions.append(part)
            decisions.append(trial_log)
            feats = aggregate_node_values(part, feats)
            h_prev = aggregate_node_values(part, h_new)
            m_prev = aggregate_node_values(part, m_new)
            amap = part.assignment[amap]
            g = g_next
            levels.append(g)

    combined = level_logits[0].copy()
    for t in range(1, n_layers):
        combined += level_logits[t][amaps[t]]

    result = ForwardResult()
    result.mode = mode
    result.params = params
    result.level_logits = level_logits
    result.combined_logits = combined
    result.trace = HierarchyTrace(levels, partitions, edge_probs, decisions)
    result.amaps = amaps
    result.layers = layers
    return result


def _level_edge_targets(trace: HierarchyTrace, labels, num_classes):
    """Merge targets for every level: 1 iff the two endpoints' level
    labels agree. A level node's label is the majority base label of its
    descendants, ties to the smaller label id."""
    counts = np.zeros((trace.levels[0].num_nodes, num_classes))
    counts[np.arange(labels.size), labels] = 1.0
    targets = []
    for t, g in enumerate(trace.levels):
        lvl_labels = counts.argmax(axis=1)
        if g.num_edges:
            ea = g.edge_array()
            targets.append((lvl_labels[ea[:, 0]] == lvl_labels[ea[:, 1]]).astype(np.float64))
        else:
            targets.append(np.zeros(0))
        if t < len(trace.partitions):
            nxt = np.zeros((trace.partitions[t].num_cliques, num_classes))
            np.add.at(nxt, trace.partitions[t].assignment, counts)
            counts = nxt
    return targets


def compute_loss(result: ForwardResult, sample: Sample, cfg: NetworkConfig):
    """Returns (total, task_loss, edge_loss).

    task_loss: mean softmax cross-entropy of the combined base logits.
    edge_loss: mean squared error of the predicted merging probabilities
    against the level merge targets, over all levels and edges.
    total = task_loss + edge_loss_weight * edge_loss.
    """
    labels = sample.labels
    if labels.max() >= cfg.num_classes or labels.min() < 0:
        raise ValueError(f"label out of range for {cfg.num_classes} classes")
    task = _mean_cross_entropy(result.combined_logits, labels)
    targets = _level_edge_targets(result.trace, labels, cfg.num_classes)
    sq_sum = 0.0
    count = 0
    for p_edge, tgt in zip(result.trace.edge_probs, targets):
        diff = p_edge - tgt
        sq_sum += float(diff @ diff)
        count += p_edge.size
    edge = sq_sum / count if count else 0.0
    return task + cfg.edge_loss_weight * edge, task, edge


def backward(result: ForwardResult, sample: Sample, cfg: NetworkConfig) -> ModelParams:
    """Exact gradients of the total loss over the realized structure.

    Nodes are processed in reverse visit order so that every gradient
    into a node's new state is accumulated before that node's own cell
    is reversed; all order-independent accumulations (parameter
    gradients, layer-input gradients) are batched per layer. Cell
    gradients of every layer land in the single shared cell block.
    """
    params = result.params
    cell = params.cell
    labels = sample.labels
    if labels.max() >= cfg.num_classes or labels.min() < 0:
        raise ValueError(f"label out of range for {cfg.num_classes} classes")
    grads = params.zeros_like()
    n_layers = len(result.level_logits)
    n0 = sample.graph.num_nodes
    hh = cell.hidden_dim

    # task-loss gradient wrt the combined logits
    d_comb = _softmax(result.combined_logits)
    d_comb[np.arange(n0), labels] -= 1.0
    d_comb /= n0

    # edge-loss gradient wrt the per-edge merging probabilities
    targets = _level_edge_targets(result.trace, labels, cfg.num_classes)
    total_edges = sum(p.size for p in result.trace.edge_probs)
    d_p_levels = []
    for p_edge, tgt in zip(result.trace.edge_probs, targets):
        if total_edges and p_edge.size:
            d_p_levels.append((2.0 * cfg.edge_loss_weight / total_edges) * (p_edge - tgt))
        else:
            d_p_levels.append(np.zeros(0))

    d_feats_next = None
    d_hprev_next = None
    d_mprev_next = None
    for t in range(n_layers - 1, -1, -1):
        book = result.layers[t]
        n = result.trace.levels[t].num_nodes
        caches = book.caches

        # head path
        d_logits = np.zeros((n, cfg.num_classes))
        np.add.at(d_logits, result.amaps[t], d_comb)
        head_w, _ = params.heads[t]
        gw, gb = grads.heads[t]
        gw += d_logits.T @ book.hidden
        gb += d_logits.sum(axis=0)
        d_h_new = d_logits @ head_w
        d_m_new = np.zeros((n, hh))

        # adjoint of the mean-aggregation into level t+1
        if t < n_layers - 1:
            part = result.trace.partitions[t]
            inv = 1.0 / part.sizes().astype(np.float64)
            assign = part.assignment
            d_h_new += (d_hprev_next * inv[:, None])[assign]
            d_m_new += (d_mprev_next * inv[:, None])[assign]
            d_feats_t = (d_feats_next * inv[:, None])[assign]
        else:
            d_feats_t = np.zeros((n, sample.features.shape[1]))

        # directed merge-probability gradients
        total_dir = int(book.offsets[-1] + len(book.nbr_idx[-1])) if n else 0
        d_flat = np.zeros(total_dir)
        if d_p_levels[t].size:
            half = 0.5 * d_p_levels[t]
            d_flat[book.ia] += half
            d_flat[book.ib] += half

        d_h_prev_t = np.zeros((n, hh))
        d_m_prev_t = np.zeros((n, hh))
        d_pre_all = np.zeros((n, 4 * hh))
        sum_prenb = np.zeros((n, hh))
        d_score_flat = np.zeros(total_dir)
        d_prenb_flat = np.zeros((total_dir, hh))
        d_mnb_flat = np.zeros((total_dir, hh))
        contrib_flat = np.zeros((total_dir, hh))
        w_e = cell.w_e
        un_T = cell.un.T
        for i in reversed(book.order):
            cache = caches[i]
            sig = cache.sig_gates
            g_u = sig[:hh]
            g_f = sig[hh:2 * hh]
            g_o = sig[2 * hh:]
            g_c = cache.g_c
            hid = cache.hidden

            dz = d_h_new[i] * (1.0 - hid * hid)
            d_go = dz * cache.memory
            dm = d_m_new[i] + dz * g_o
            d_m_prev_t[i] += dm * g_f

            row = d_pre_all[i]
            row[:hh] = (dm * g_c) * g_u * (1.0 - g_u)
            row[hh:2 * hh] = (dm * cache.m_prev) * g_f * (1.0 - g_f)
            row[2 * hh:3 * hh] = d_go * g_o * (1.0 - g_o)
            row[3 * hh:] = (dm * g_u) * (1.0 - g_c * g_c)

            nb_gate = cache.nb_gate
            if nb_gate is not None:
                off = book.offsets[i]
                k = nb_gate.shape[0]
                sl = slice(off, off + k)
                p = cache.merge_probs
                d_score = d_flat[sl] * p * (1.0 - p)
                d_score_flat[sl] = d_score
                dmk = dm * cache.inv_k
                d_nbgate = dmk * cache.m_sel + d_score[:, None] * w_e
                d_prenb = d_nbgate * nb_gate * (1.0 - nb_gate)
                d_prenb_flat[sl] = d_prenb
                sum_prenb[i] = d_prenb.sum(axis=0)
                m_rows = dmk * nb_gate
                d_mnb_flat[sl] = m_rows

                d_navg = un_T @ np.concatenate((row[:hh], row[2 * hh:]))
                contrib = d_navg * cache.inv_k
                contrib_flat[sl] = contrib
                vis = cache.nbr_visited
                if vis.any():
                    idx = book.nbr_idx[i]
                    vi = idx[vis]
                    d_h_new[vi] += contrib
                    d_m_new[vi] += m_rows[vis]

        # deferred neighbor routing (order-independent accumulations)
        if total_dir:
            big_idx = np.concatenate(book.nbr_idx)
            flags_flat = np.concatenate(
                [caches[i].nbr_visited for i in range(n)
                 if caches[i].nbr_visited is not None])
            nb_gate_flat = np.concatenate(
                [caches[i].nb_gate for i in range(n)
                 if caches[i].nb_gate is not None])
            grads.cell.w_e += nb_gate_flat.T @ d_score_flat
            hp_rows = d_prenb_flat @ cell.u_fn
            unv = ~flags_flat
            if unv.any():
                hp_rows[unv] += contrib_flat[unv]
                np.add.at(d_m_prev_t, big_idx[unv], d_mnb_flat[unv])
            np.add.at(d_h_prev_t, big_idx, hp_rows)
            grads.cell.u_fn += d_prenb_flat.T @ book.h_prev[big_idx]

        # batched parameter and layer-input gradients
        navg_all = np.array([caches[i].navg for i in range(n)])
        grads.cell.uh += d_pre_all.T @ book.h_prev
        d_unpre_all = np.concatenate((d_pre_all[:, :hh], d_pre_all[:, 2 * hh:]), axis=1)
        grads.cell.un += d_unpre_all.T @ navg_all
        grads.cell.b += d_pre_all.sum(axis=0)
        grads.cell.b[hh:2 * hh] += sum_prenb.sum(axis=0)
        d_wx_rows = d_pre_all.copy()
        d_wx_rows[:, hh:2 * hh] += sum_prenb
        grads.cell.wx += d_wx_rows.T @ book.inputs
        d_feats_t += d_wx_rows @ cell.wx
        d_h_prev_t += d_pre_all @ cell.uh

        d_feats_next = d_feats_t
        d_hprev_next = d_h_prev_t
        d_mprev_next = d_m_prev_t

    return grads


def predict(sample: Sample, params: ModelParams, cfg: NetworkConfig, rng):
    """Test-mode forward pass followed by an argmax over the combined
    logits; ties go to the smaller class id."""
    result = forward(sample, params, cfg, rng, mode="test")
    return np.argmax(result.combined_logits, axis=1)


CHECKPOINT_MAGIC = "SEVOLVE-CKPT v1"


def save_checkpoint(path, params: ModelParams, cfg: NetworkConfig):
    """Versioned text checkpoint: a header with the model dimensions, then
    every named tensor with its dims and row-major full-precision values."""
    lines = [
        f"{CHECKPOINT_MAGIC} D={cfg.input_dim} H={cfg.hidden_dim} "
        f"C={cfg.num_classes} layers={cfg.num_layers}"
    ]
    for name, t in params.tensors():
        dims = " ".join(str(d) for d in t.shape)
        lines.append(f"tensor {name} {dims}")
        rows = t.reshape(1, -1) if t.ndim == 1 else t
        for row in rows:
            lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Reads a checkpoint, validating tensor names and dims exactly.

    Returns (params, meta) with meta holding input_dim, hidden_dim,
    num_classes, and num_layers.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC + " "):
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    fields = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    try:
        meta = {
            "input_dim": int(fields["D"]),
            "hidden_dim": int(fields["H"]),
            "num_classes": int(fields["C"]),
            "num_layers": int(fields["layers"]),
        }
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint header missing field {exc}") from exc
    cell = CellParams(meta["input_dim"], meta["hidden_dim"])
    heads = [(np.zeros((meta["num_classes"], meta["hidden_dim"])),
              np.zeros(meta["num_classes"])) for _ in range(meta["num_layers"])]
    params = ModelParams(cell, heads)

    pos = 1
    for name, t in params.tensors():
        if pos >= len(lines):
            raise ValueError(f"{path}: truncated before tensor {name}")
        parts = lines[pos].split()
        if parts[:2] != ["tensor", name]:
            raise ValueError(f"{path}:{pos + 1}: expected tensor {name}, got {lines[pos]!r}")
        dims = tuple(int(x) for x in parts[2:])
        if dims != t.shape:
            raise ValueError(f"{path}:{pos + 1}: tensor {name} dims {dims} != {t.shape}")
        pos += 1
        rows = 1 if t.ndim == 1 else t.shape[0]
        width = t.shape[-1]
        flat = t.reshape(rows, width)
        for r in range(rows):
            if pos >= len(lines):
                raise ValueError(f"{path}: truncated inside tensor {name}")
            vals = lines[pos].split()
            if len(vals) != width:
                raise ValueError(
                    f"{path}:{pos + 1}: tensor {name} row {r} has {len(vals)} "
                    f"values, expected {width}")
            flat[r] = [float(v) for v in vals]
            pos += 1
    if pos != len(lines):
        raise ValueError(f"{path}:{pos + 1}: trailing content after last tensor")
    return params, meta
