"""Thin max-flow/min-cut layer over scipy's solver.

Capacities are quantized to integers on a fixed grid so that solves are
exact integer computations and reruns are bit-identical.  The cut labeling
is the set of nodes reachable from the source in the residual network,
which is deterministic given the fixed arc ordering the builders use.

scipy's flow kernel computes in 32-bit integers and silently wraps larger
inputs, so this layer rejects any graph whose arc capacities or achievable
flow value could leave int32 range.  Callers size their quantization grid
from a bound on the total terminal capacity, not from the largest atom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

from .errors import BadParamsError

# Quantization targets a total-capacity budget of 2^30: every single arc
# and any achievable flow value then fit in int32 with a factor-two margin.
TOTAL_CAP_BITS = 30

_INT32_MAX = np.iinfo(np.int32).max


@dataclass(frozen=True)
class FlowGraph:
    """Directed capacitated graph with dedicated source/sink nodes."""

    n_nodes: int
    source: int
    sink: int
    tails: np.ndarray = field(repr=False)
    heads: np.ndarray = field(repr=False)
    capacities: np.ndarray = field(repr=False)  # int64, >= 0

    def __post_init__(self):
        t, h, c = self.tails, self.heads, self.capacities
        if not (t.shape == h.shape == c.shape) or t.ndim != 1:
            raise BadParamsError("arc arrays must be 1d and equal length")
        if c.dtype != np.int64 or (c < 0).any():
            raise BadParamsError("capacities must be nonnegative int64")
        if not (0 <= self.source < self.n_nodes and 0 <= self.sink < self.n_nodes):
            raise BadParamsError("source/sink out of range")
        if self.source == self.sink:
            raise BadParamsError("source and sink must differ")


@dataclass(frozen=True)
class CutResult:
    """Max-flow value and the source-side labeling of the minimum cut."""

    flow_value: int
    source_side: np.ndarray = field(repr=False)  # bool per node


def quantize_capacities(raw: np.ndarray) -> np.ndarray:
    """Round nonnegative float capacities onto an int32-safe integer grid.

    The quantum is sized so the capacity total lands at 2^30, keeping each
    arc and the max-flow value inside the solver's 32-bit range.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and float(raw.min()) < 0:
        raise BadParamsError("capacities must be nonnegative")
    total = float(raw.sum())
    if total == 0.0:
        return np.zeros(raw.shape, dtype=np.int64)
    quantum = total / float(1 << TOTAL_CAP_BITS)
    return np.rint(raw / quantum).astype(np.int64)


def max_flow_min_cut(graph: FlowGraph) -> CutResult:
    """Exact integer max-flow; cut side from residual reachability.

    Arcs missing an explicit reverse direction get a zero-capacity twin so
    the residual network lives on one fixed sparsity pattern.
    """
    n = graph.n_nodes
    tails = np.concatenate([graph.tails, graph.heads])
    heads = np.concatenate([graph.heads, graph.tails])
    caps = np.concatenate([graph.capacities, np.zeros_like(graph.capacities)])
    mat64 = csr_matrix((caps, (tails, heads)), shape=(n, n), dtype=np.int64)
    # duplicate arcs have summed; zero twins merged into existing entries
    if mat64.data.size and int(mat64.data.max()) > _INT32_MAX:
        raise BadParamsError("arc capacity exceeds the solver's 32-bit range")
    src_out = int(mat64.data[mat64.indptr[graph.source] : mat64.indptr[graph.source + 1]].sum())
    snk_in = int(mat64.data[mat64.indices == graph.sink].sum())
    if min(src_out, snk_in) > _INT32_MAX:
        raise BadParamsError("flow value could exceed the solver's 32-bit range")
    mat = mat64.astype(np.int32)
    res = maximum_flow(mat, graph.source, graph.sink)
    flow = res.flow
    if np.array_equal(mat.indptr, flow.indptr) and np.array_equal(mat.indices, flow.indices):
        residual = mat.copy()
        residual.data = (mat.data - flow.data > 0).astype(np.int32)
    else:  # scipy stopped preserving the input pattern; align by subtraction
        residual = (mat - flow).tocsr()
        residual.data = (residual.data > 0).astype(np.int32)
    residual.eliminate_zeros()
    order = breadth_first_order(
        residual, graph.source, directed=True, return_predecessors=False
    )
    side = np.zeros(n, dtype=bool)
    side[order] = True
    return CutResult(flow_value=int(res.flow_value), source_side=side)


def exhaustive_min_cut(graph: FlowGraph) -> int:
    """Brute-force minimum s/t cut value by enumerating all labelings.

    Only for tiny graphs; the value (not the labeling) is the oracle.
    """
    n = graph.n_nodes
    free = [v for v in range(n) if v not in (graph.source, graph.sink)]
    if len(free) > 20:
        raise BadParamsError("exhaustive cut limited to 20 free nodes")
    tails, heads, caps = graph.tails, graph.heads, graph.capacities
    best = None
    for bits in range(1 << len(free)):
        side = np.zeros(n, dtype=bool)
        side[graph.source] = True
        for j, v in enumerate(free):
            if bits >> j & 1:
                side[v] = True
        value = int(caps[side[tails] & ~side[heads]].sum())
        if best is None or value < best:
            best = value
    return best
