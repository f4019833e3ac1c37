"""Exact discrete optimization over a minimum spanning tree of a control grid.

The deformable stage assigns each control node one displacement out of a
finite candidate set, minimizing

    sum_i cost(i, l_i) + alpha * sum_{(i,j) in tree} ||v_i(l_i) - v_j(l_j)||^2

where v_i(l) = offsets[i] + labels[l] is the node's total displacement. A
spanning tree makes this exactly solvable by one leaf-to-root sweep of
min-convolution messages followed by a root-to-leaf backtrace. Ties are
broken toward the smaller-magnitude displacement, then lexicographically,
so an all-tied problem yields the all-zero assignment. All steps are
deterministic for fixed inputs.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from .errors import GraphError, ValidationError


def grid_edges(shape) -> np.ndarray:
    """6-connectivity edges of a node grid, nodes indexed in C order.

    Returns an (E, 2) int array with node_a < node_b, lexicographic order.
    """
    shape = tuple(int(s) for s in shape)
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    pairs = []
    for axis in range(len(shape)):
        lo = [slice(None)] * len(shape)
        hi = [slice(None)] * len(shape)
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        pairs.append(np.stack([idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()], axis=1))
    edges = np.concatenate(pairs, axis=0)
    return edges[np.lexsort((edges[:, 1], edges[:, 0]))]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def minimum_spanning_tree(n_nodes: int, edges: np.ndarray,
                          weights: np.ndarray | None = None) -> np.ndarray:
    """Kruskal MST; ties broken by (weight, node_a, node_b) for determinism.

    Returns the (n_nodes - 1, 2) tree edge array or raises
    :class:`GraphError` when the graph is disconnected.
    """
    edges = np.asarray(edges, dtype=np.int64)
    if n_nodes == 1:
        return np.empty((0, 2), dtype=np.int64)
    if edges.size == 0:
        raise GraphError("graph has no edges")
    if weights is None:
        weights = np.zeros(len(edges))
    weights = np.asarray(weights, dtype=np.float64)
    if not np.isfinite(weights).all():
        raise ValidationError("edge weights must be finite")
    order = np.lexsort((edges[:, 1], edges[:, 0], weights))
    uf = _UnionFind(n_nodes)
    tree = []
    for e in order:
        a, b = int(edges[e, 0]), int(edges[e, 1])
        if uf.union(a, b):
            tree.append((a, b))
            if len(tree) == n_nodes - 1:
                break
    if len(tree) != n_nodes - 1:
        raise GraphError("graph is disconnected; spanning tree does not exist")
    return np.asarray(tree, dtype=np.int64)


def _orient(n_nodes: int, tree: np.ndarray, root: int = 0):
    """BFS orientation: parent array plus a root-first visit order."""
    adj = [[] for _ in range(n_nodes)]
    for a, b in tree:
        adj[a].append(b)
        adj[b].append(a)
    parent = np.full(n_nodes, -1, dtype=np.int64)
    order = [root]
    seen = np.zeros(n_nodes, dtype=bool)
    seen[root] = True
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for nxt in adj[node]:
            if not seen[nxt]:
                seen[nxt] = True
                parent[nxt] = node
                order.append(nxt)
                queue.append(nxt)
    return parent, order


def _label_order(labels: np.ndarray) -> np.ndarray:
    """Indices sorting labels by squared magnitude, then lexicographically."""
    mag = (labels ** 2).sum(axis=1)
    return np.lexsort((labels[:, 2], labels[:, 1], labels[:, 0], mag))


def _lattice_view(labels: np.ndarray):
    """Cartesian-product structure of a label set, or None.

    When the labels form a complete axis-aligned grid (every combination of
    the per-axis values present exactly once), the squared-distance message
    separates per axis and costs O(L * n) per edge instead of O(L^2).
    Returns (order, shape, axes) with ``labels[order]`` in C grid order.
    """
    axes = [np.unique(labels[:, c]) for c in range(3)]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != labels.shape[0]:
        return None
    order = np.lexsort((labels[:, 2], labels[:, 1], labels[:, 0]))
    grid = np.stack(
        np.meshgrid(*axes, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    if not np.array_equal(labels[order], grid):
        return None
    return order, shape, axes


def _lattice_message(row: np.ndarray, lattice, alpha: float,
                     delta: np.ndarray):
    """min-convolution message over a cartesian label grid.

    Computes, for every parent label m,
        M(m) = min_l row(l) + alpha * ||lab_l - lab_m - delta||^2
    one axis at a time, plus the per-parent argmin for the backtrace.
    Returns (M, best_child) indexed in the original label order.
    """
    order, shape, axes = lattice
    cur = row[order].reshape(shape)
    args = []
    for axis in range(3):
        vals = axes[axis]
        pen = alpha * (vals[None, :] - vals[:, None] - delta[axis]) ** 2
        moved = np.moveaxis(cur, axis, -1)
        table = moved[..., None, :] + pen  # (..., n_query, n_label)
        arg = table.argmin(-1)
        val = np.take_along_axis(table, arg[..., None], -1)[..., 0]
        cur = np.moveaxis(val, -1, axis)
        args.append(np.moveaxis(arg, -1, axis))
    # compose per-axis argmins: later axes were still in label space when
    # the earlier ones were minimized, so unwind from the last axis back
    q0, q1 = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]),
                         indexing="ij")
    l2 = args[2]
    l1 = args[1][q0[..., None], q1[..., None], l2]
    l0 = args[0][q0[..., None], l1, l2]
    child_flat = (l0 * shape[1] + l1) * shape[2] + l2
    mins = np.empty_like(row)
    mins[order] = cur.ravel()
    best = np.empty(len(row), dtype=np.int64)
    best[order] = order[child_flat.ravel()]
    return mins, best


def tree_objective(node_costs: np.ndarray, labels: np.ndarray,
                   assignment: np.ndarray, tree: np.ndarray, alpha: float,
                   offsets: np.ndarray | None = None) -> float:
    """Objective of an assignment: node costs + alpha * tree smoothness."""
    node_costs = np.asarray(node_costs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    total = float(node_costs[np.arange(len(node_costs)), assignment].sum())
    if alpha != 0.0 and len(tree):
        v = labels[assignment]
        if offsets is not None:
            v = v + np.asarray(offsets, dtype=np.float64)
        tree = np.asarray(tree, dtype=np.int64)
        diff = v[tree[:, 0]] - v[tree[:, 1]]
        total += float(alpha) * float((diff ** 2).sum())
    return total


def mst_optimize(node_costs: np.ndarray, labels: np.ndarray, edges: np.ndarray,
                 alpha: float, edge_weights: np.ndarray | None = None,
                 offsets: np.ndarray | None = None) -> np.ndarray:
    """Exact minimizer of the tree-structured displacement objective.

    Parameters
    ----------
    node_costs : (N, L) array
        Data cost of assigning label l to node i; must be finite.
    labels : (L, 3) array
        Candidate displacement vectors shared by all nodes.
    edges : (E, 2) array
        Undirected graph over the N nodes; a spanning tree of it (minimum
        under ``edge_weights``) carries the smoothness term.
    alpha : float
        Smoothness weight, >= 0.
    edge_weights : (E,) array, optional
        Tree-selection weights (e.g. gradient affinity); uniform if omitted.
    offsets : (N, 3) array, optional
        Per-node displacement added to every label (multi-level
        initialization); the smoothness term acts on offsets + labels.

    Returns
    -------
    (N,) int array of label indices into ``labels``.
    """
    costs = np.asarray(node_costs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if costs.ndim != 2 or labels.ndim != 2 or labels.shape[1] != 3:
        raise ValidationError("node_costs must be (N, L) and labels (L, 3)")
    n_nodes, n_labels = costs.shape
    if labels.shape[0] != n_labels:
        raise ValidationError(
            f"{n_labels} cost columns but {labels.shape[0]} labels"
        )
    if not np.isfinite(costs).all():
        raise ValidationError("cost tables must be finite")
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")

    perm = _label_order(labels)
    lab = labels[perm]
    costs = costs[:, perm]

    if n_nodes == 1:
        return np.array([perm[int(np.argmin(costs[0]))]], dtype=np.int64)

    tree = minimum_spanning_tree(n_nodes, edges, edge_weights)
    parent, order = _orient(n_nodes, tree)

    if alpha == 0.0:
        # decoupled: independent per-node argmin (first hit = smallest label)
        return perm[np.argmin(costs, axis=1)]

    if offsets is None:
        offsets = np.zeros((n_nodes, 3))
    offsets = np.asarray(offsets, dtype=np.float64)

    alpha = float(alpha)
    lattice = _lattice_view(lab)
    if lattice is None:
        gram2 = (-2.0 * alpha) * (lab @ lab.T)  # (L, L), shared by every edge
        lab_norm2 = (lab ** 2).sum(axis=1)
    off_norm2 = (offsets ** 2).sum(axis=1)
    off_dot_lab = offsets @ lab.T  # (N, L)
    if lattice is None:
        v_norm2 = off_norm2[:, None] + 2.0 * off_dot_lab + lab_norm2[None, :]

    acc = costs.copy()
    best_child = {}
    for node in reversed(order):
        if parent[node] < 0:
            continue
        par = parent[node]
        if lattice is not None:
            mins, arg = _lattice_message(acc[node], lattice, alpha,
                                         offsets[par] - offsets[node])
            acc[par] += mins
            best_child[node] = arg
            continue
        row = acc[node] + alpha * v_norm2[node] - 2.0 * alpha * off_dot_lab[par]
        table = row[:, None] + gram2
        arg = np.argmin(table, axis=0)
        mins = table[arg, np.arange(n_labels)]
        const = alpha * v_norm2[par] - 2.0 * alpha * (
            float(offsets[node] @ offsets[par]) + off_dot_lab[node]
        )
        acc[par] += mins + const
        best_child[node] = arg

    assign = np.empty(n_nodes, dtype=np.int64)
    assign[order[0]] = int(np.argmin(acc[order[0]]))
    for node in order[1:]:
        assign[node] = best_child[node][assign[parent[node]]]
    return perm[assign]
