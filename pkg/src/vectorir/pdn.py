"""Resistive power-grid model and golden per-instance dynamic IR drop.

The grid is a single-layer mesh with one node per tile centre. Every via
stack is a pad held at ``vdd`` and tied to its nearest mesh node through the
via-stack resistance; every instance draws a constant current ``p/vdd`` from
its nearest mesh node through an attachment resistance. Pads are eliminated,
leaving a symmetric positive definite system over the free nodes whose
solution is the voltage drop ``vdd - v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .design_io import DesignBundle, SliceTrace
from .features import TILE_SIZE, temporal_power


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridParams:
    pitch: float = TILE_SIZE
    segment_resistance: float = 2.0  # ohm per pitch-length rail segment
    via_resistance: float = 8.0  # ohm per via stack
    attach_resistance: float = 20.0  # ohm from an instance to its node


@dataclass(frozen=True, eq=False)
class GridModel:
    """Reduced nodal system ``G d = i`` over non-pad nodes.

    ``row[k]`` is the row of node ``k`` in ``G`` or -1 for a pad.
    """

    num_nodes: int
    edges: np.ndarray
    conductance: np.ndarray
    pads: np.ndarray
    G: sp.csr_matrix
    row: np.ndarray
    node_xy: np.ndarray | None = None
    inst_node: np.ndarray | None = None
    attach_resistance: float = 0.0

    @property
    def num_free(self) -> int:
        return self.G.shape[0]

    @classmethod
    def from_edges(cls, num_nodes: int, edges, conductance, pads, **extra) -> "GridModel":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        g = np.asarray(conductance, dtype=np.float64).reshape(-1)
        pads = np.unique(np.asarray(pads, dtype=np.int64).reshape(-1))
        if len(edges) != len(g):
            raise GridError("one conductance per edge required")
        if np.any(~np.isfinite(g)) or np.any(g <= 0):
            raise GridError("conductances must be positive and finite")
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise GridError("edge references an unknown node")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GridError("self-loop edge")
        if pads.size == 0:
            raise GridError("grid has no pads")
        adj = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
                            shape=(num_nodes, num_nodes))
        ncomp, label = connected_components(adj, directed=False)
        fed = np.zeros(ncomp, dtype=bool)
        fed[label[pads]] = True
        if not fed.all():
            orphan = int(np.flatnonzero(~fed[label])[0])
            raise GridError(f"node {orphan} is disconnected from every pad")

        is_pad = np.zeros(num_nodes, dtype=bool)
        is_pad[pads] = True
        row = np.full(num_nodes, -1, dtype=np.int64)
        row[~is_pad] = np.arange(int((~is_pad).sum()))
        a, b = edges[:, 0], edges[:, 1]
        n_free = int((~is_pad).sum())
        diag = np.zeros(n_free)
        np.add.at(diag, row[a[~is_pad[a]]], g[~is_pad[a]])
        np.add.at(diag, row[b[~is_pad[b]]], g[~is_pad[b]])
        both = ~is_pad[a] & ~is_pad[b]
        ra, rb, gb = row[a[both]], row[b[both]], g[both]
        G = sp.coo_matrix(
            (np.concatenate([diag, -gb, -gb]),
             (np.concatenate([np.arange(n_free), ra, rb]), np.concatenate([np.arange(n_free), rb, ra]))),
            shape=(n_free, n_free),
        ).tocsr()
        return cls(num_nodes, edges, g, pads, G, row, **extra)

    def injection(self, node_currents: np.ndarray) -> np.ndarray:
        """Restrict full-node currents (rows = nodes) to the free-node system."""
        return np.asarray(node_currents)[self.row >= 0]


def build_system(design: DesignBundle, params: GridParams | None = None) -> GridModel:
    """Mesh over the die with via-stack pads and instance attachments."""
    params = params or GridParams()
    p = params.pitch
    W = max(1, math.ceil(design.width / p - 1e-9))
    L = max(1, math.ceil(design.length / p - 1e-9))
    n_mesh = W * L
    idx = np.arange(n_mesh).reshape(W, L)
    horiz = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    vert = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    mesh_edges = np.concatenate([horiz, vert])
    mesh_g = np.full(len(mesh_edges), 1.0 / params.segment_resistance)

    def nearest(xy):
        ix = np.clip(np.floor(xy[:, 0] / p).astype(np.int64), 0, W - 1)
        iy = np.clip(np.floor(xy[:, 1] / p).astype(np.int64), 0, L - 1)
        return ix * L + iy

    via_nodes = nearest(design.vias) if len(design.vias) else np.empty(0, np.int64)
    pads = n_mesh + np.arange(len(via_nodes))
    via_edges = np.stack([via_nodes, pads], axis=1)
    edges = np.concatenate([mesh_edges, via_edges])
    g = np.concatenate([mesh_g, np.full(len(via_edges), 1.0 / params.via_resistance)])
    node_xy = np.stack([(idx.ravel() // L + 0.5) * p, (idx.ravel() % L + 0.5) * p], axis=1)
    return GridModel.from_edges(
        n_mesh + len(pads), edges, g, pads,
        node_xy=node_xy, inst_node=nearest(design.xy), attach_resistance=params.attach_resistance,
    )


def solve_dc(G, currents, tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradient for ``G x = currents``.

    ``currents`` may be a vector or a matrix whose columns are solved
    independently. Each column stops once ``||b - Gx|| <= tol * ||b||``;
    zero columns return zero. ``max_iter`` defaults to ``10 * sqrt(n)``.
    """
    G = sp.csr_matrix(G)
    b = np.asarray(currents, dtype=np.float64)
    vec = b.ndim == 1
    B = b.reshape(b.shape[0], -1)
    n = G.shape[0]
    if B.shape[0] != n:
        raise ValueError(f"right-hand side has {B.shape[0]} rows, system has {n}")
    if max_iter is None:
        max_iter = max(10, math.ceil(10 * math.sqrt(n)))
    minv = 1.0 / G.diagonal()
    bnorm = np.linalg.norm(B, axis=0)
    target = tol * bnorm
    X = np.zeros_like(B)
    R = B.copy()
    it = 0
    rel = np.zeros(B.shape[1])
    while True:
        Z = minv[:, None] * R
        P = Z.copy()
        rz = np.einsum("ij,ij->j", R, Z)
        active = np.linalg.norm(R, axis=0) > target
        while active.any() and it < max_iter:
            it += 1
            AP = G @ P
            pap = np.einsum("ij,ij->j", P, AP)
            alpha = np.divide(rz, pap, out=np.zeros_like(rz), where=active & (pap != 0))
            X += alpha * P
            R -= alpha * AP
            active = np.linalg.norm(R, axis=0) > target
            Z = minv[:, None] * R
            rz_new = np.einsum("ij,ij->j", R, Z)
            beta = np.divide(rz_new, rz, out=np.zeros_like(rz), where=active & (rz != 0))
            P = Z + beta * P
            rz = rz_new
        # the recursive residual drifts from the true one; restart if needed
        R = B - G @ X
        rnorm = np.linalg.norm(R, axis=0)
        rel = np.divide(rnorm, bnorm, out=np.zeros_like(rnorm), where=bnorm > 0)
        if np.all(rnorm <= target):
            break
        if it >= max_iter:
            raise SolverError("conjugate gradient did not converge", float(rel.max()), it)
    return X[:, 0] if vec else X


@dataclass(frozen=True, eq=False)
class GoldenIR:
    """Worst-case drop per instance over all steps, in volts."""

    ir: np.ndarray
    steps: np.ndarray | None = None  # (N, n*t) when retained


def step_currents(design: DesignBundle, trace: SliceTrace) -> np.ndarray:
    """Instance currents ``p_t(j)/vdd`` as an ``(N, n*t)`` array."""
    b = trace.toggle_matrix(design.num_instances)
    return temporal_power(design.p_i, design.p_s, design.p_l, b) / design.vdd


def golden_dynamic_ir(design: DesignBundle, trace: SliceTrace | int, grid: GridModel | None = None,
                      keep_steps: bool = False, tol: float = 1e-10) -> GoldenIR:
    """Solve the grid once per distinct step and take the per-instance maximum drop."""
    if isinstance(trace, (int, np.integer)):
        trace = design.slices[int(trace)]
    grid = grid or build_system(design)
    cur = step_currents(design, trace)
    node_cur = np.zeros((grid.num_nodes, cur.shape[1]))
    np.add.at(node_cur, grid.inst_node, cur)
    rhs = grid.injection(node_cur)
    uniq, inverse = np.unique(rhs, axis=1, return_inverse=True)
    drops = solve_dc(grid.G, uniq, tol=tol)[:, np.asarray(inverse).reshape(-1)]
    node_drop = np.zeros((grid.num_nodes, cur.shape[1]))
    node_drop[grid.row >= 0] = drops
    per_step = node_drop[grid.inst_node] + grid.attach_resistance * cur
    ir = per_step.max(axis=1)
    if np.any(ir < 0) or np.any(ir >= design.vdd):
        raise GridError("IR drop outside [0, vdd); the resistive model is out of range")
    return GoldenIR(ir=ir, steps=per_step if keep_steps else None)


def mirror_design(design: DesignBundle) -> DesignBundle:
    """Reflect the design about the vertical centre line ``x = width/2``."""
    xy = design.xy.copy()
    xy[:, 0] = design.width - xy[:, 0]
    vias = design.vias.copy()
    if len(vias):
        vias[:, 0] = design.width - vias[:, 0]
    return DesignBundle(design.width, design.length, design.vdd, design.ids, xy, design.power,
                        vias, design.slices, design.cycles, design.substeps)
