"""Tiling planner: search tile shapes per node kernel under the L1 budget.

Graph rows are grouped into node kernels (a body convolution plus fused
prologue/epilogue ops, a standalone elementwise op, or a fully connected
head).  Each node kernel is tiled in one of two schemes:

  spatial       output rows are cut into stripes (consecutive stripes share
                kernel-stride input rows), the full weight set stays resident
                in L1, and workers split the output width;
  feature-wise  full feature maps stay resident, the output channel range is
                cut into chunks (weights stream per chunk), the input channel
                range may also be cut, and workers split output channels.

When the input channel range is cut, 32-bit partial accumulators for the
current output tile stay resident between chunks: their 4-byte footprint is
charged to the budget and a single renormalization happens after the last
chunk, which is what keeps tiled execution bit-identical to the untiled
kernels.  W is never tiled.  Double buffering doubles any stream that moves
more than one tile.  Remainder tiles are allowed.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import net

DEFAULT_L1_BUDGET = 60 * 1024   # 4 KB of the 64 KB scratchpad reserved for runtime
SPATIAL = "spatial"
FEATUREWISE = "feature-wise"
CORES = 8


class InfeasibleError(ValueError):
    pass


def _align4(n: int) -> int:
    return (n + 3) & ~3


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _chunks(total: int, size: int) -> list[tuple[int, int]]:
    out = []
    start = 0
    while start < total:
        end = min(start + size, total)
        out.append((start, end))
        start = end
    return out


@dataclass(frozen=True)
class NodeKernel:
    """A tiling unit: one body op plus whatever the graph fuses around it."""

    name: str
    kind: str                       # "conv" | "ew" | "fc"
    rows: tuple[net.LayerSpec, ...] # graph rows this node covers, in order
    input: str                      # main input tensor
    output: str                     # output tensor (the last fused row's name)
    addend: str | None = None       # residual-join operand DMA'd per tile

    @property
    def body(self) -> net.LayerSpec:
        return self.rows[0]

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def fused_pool(self) -> bool:
        return self.body.fused_pool

    @property
    def fused_add(self) -> bool:
        return self.addend is not None

    # node output extents (after any fused pooling)
    @property
    def h_out(self) -> int:
        return self.body.h_out

    @property
    def w_out(self) -> int:
        return self.body.w_out


def node_kernels(graph: net.NetworkGraph) -> list[NodeKernel]:
    """Group the 18 graph rows into node kernels (13 for DroNet).

    A residual join and the ReLU that follows it ride as epilogue of the
    bypass convolution; a ReLU that follows anything else is its own node.
    """
    rows = graph.layers
    nodes: list[NodeKernel] = []
    consumed = set()
    for i, spec in enumerate(rows):
        if spec.name in consumed:
            continue
        if spec.kind == net.CONV:
            fused = [spec]
            join = next((r for r in rows if r.kind == net.ADD
                         and r.bypass_source == spec.name), None)
            if join is not None:
                fused.append(join)
                tail = join
                if not join.fused_relu:
                    relu_row = next(r for r in rows
                                    if r.kind == net.RELU and r.inputs == (join.name,))
                    fused.append(relu_row)
                    tail = relu_row
                name = f"{spec.name}+add+relu"
                nodes.append(NodeKernel(name, "conv", tuple(fused), spec.inputs[0],
                                        tail.name, addend=join.inputs[0]))
            else:
                name = spec.name + ("+pool" if spec.fused_pool else "")
                nodes.append(NodeKernel(name, "conv", (spec,), spec.inputs[0], spec.name))
            consumed.update(r.name for r in fused)
        elif spec.kind == net.RELU:
            nodes.append(NodeKernel(spec.name, "ew", (spec,), spec.inputs[0], spec.name))
            consumed.add(spec.name)
        elif spec.kind == net.FC:
            nodes.append(NodeKernel(spec.name, "fc", (spec,), spec.inputs[0], spec.name))
            consumed.add(spec.name)
        elif spec.kind == net.ADD:
            raise ValueError(f"{spec.name}: join without a bypass convolution")
    return nodes


@dataclass
class BufferSpec:
    bytes: int          # one copy, 4-byte aligned
    double: bool = False

    @property
    def total(self) -> int:
        return self.bytes * (2 if self.double else 1)


@dataclass
class TilePlan:
    node: NodeKernel
    scheme: str
    h_tile: int         # node-output rows per stripe (spatial); full otherwise
    n_h: int
    ci_tile: int
    n_ci: int
    co_tile: int
    n_co: int
    buffers: dict[str, BufferSpec]
    l1_budget: int
    est_cycles: float | None = None

    @property
    def footprint(self) -> int:
        return sum(b.total for b in self.buffers.values())

    @property
    def n_tiles(self) -> int:
        return self.n_h * self.n_ci * self.n_co

    @property
    def overlap_rows(self) -> int:
        """Input rows shared by consecutive stripes (kernel height - stride)."""
        if self.scheme != SPATIAL or self.n_h == 1 or self.node.kind != "conv":
            return 0
        return max(self.node.body.kh - self.node.body.stride, 0)

    # -- tile geometry ------------------------------------------------------

    def h_ranges(self) -> list[tuple[int, int]]:
        if self.scheme == SPATIAL:
            return _chunks(self.node.h_out, self.h_tile)
        return [(0, self.node.h_out)]

    def ci_ranges(self) -> list[tuple[int, int]]:
        return _chunks(self.node.body.k_in, self.ci_tile)

    def co_ranges(self) -> list[tuple[int, int]]:
        return _chunks(self.node.body.k_out, self.co_tile)

    def conv_rows(self, h0: int, h1: int) -> tuple[int, int]:
        """Node-output row range -> convolution-output row range."""
        if self.node.fused_pool:
            return 2 * h0, min(2 * h1, self.node.body.conv_h_out)
        return h0, h1

    def input_rows(self, h0: int, h1: int) -> tuple[int, int, int, int]:
        """Input rows a stripe reads: (first, last+1, pad_above, pad_below)."""
        body = self.node.body
        c0, c1 = self.conv_rows(h0, h1)
        pad = body.kh // 2
        lo = c0 * body.stride - pad
        hi = (c1 - 1) * body.stride + body.kh - pad
        pad_above = max(-lo, 0)
        pad_below = max(hi - body.h_in, 0)
        return max(lo, 0), min(hi, body.h_in), pad_above, pad_below

    # -- worker model ---------------------------------------------------------

    def worker_ranges(self, span: int) -> list[tuple[int, int]]:
        return _chunks(span, _ceil_div(span, CORES))

    def worker_efficiency(self, span: int) -> float:
        return span / (CORES * _ceil_div(span, CORES))

    def mac_work_units(self) -> float:
        """Sum of tile MACs / per-tile worker efficiency (load-balance aware)."""
        node = self.node
        if node.kind == "fc":
            units = 0.0
            for c0, c1 in self.ci_ranges():
                units += (c1 - c0) / self.worker_efficiency(c1 - c0)
            return units
        body = node.body
        units = 0.0
        if self.scheme == SPATIAL:
            eff = self.worker_efficiency(node.w_out)
            for h0, h1 in self.h_ranges():
                c0, c1 = self.conv_rows(h0, h1)
                macs = body.k_out * body.k_in * body.kh * body.kw \
                    * (c1 - c0) * body.conv_w_out
                units += macs / eff
        else:
            for o0, o1 in self.co_ranges():
                eff = self.worker_efficiency(o1 - o0)
                macs = (o1 - o0) * body.k_in * body.kh * body.kw \
                    * body.conv_h_out * body.conv_w_out
                units += macs / eff
        return units

    def dispatch_forks(self) -> int:
        """Fork/join parallel sections issued while running this plan."""
        if self.node.kind == "fc":
            return len(self.ci_ranges())
        if self.scheme == SPATIAL:
            return self.n_h
        forks = 0
        for o0, o1 in self.co_ranges():
            forks += _ceil_div(o1 - o0, CORES)
        if self.node.kind == "ew":
            forks *= self.n_h
        return forks

    # -- transfer accounting --------------------------------------------------

    def transfer_counts(self) -> dict[str, int]:
        node = self.node
        if node.kind == "fc":
            n = len(self.ci_ranges())
            return {"in": n, "weights": n, "out": 1}
        if node.kind == "ew":
            if self.scheme == SPATIAL:
                n = self.n_h
            else:
                n = len(self.ci_ranges())
            return {"in": n, "out": n}
        counts = {"in": self.n_h * self.n_ci * self.n_co,
                  "out": self.n_h * self.n_co}
        counts["weights"] = 1 if self.scheme == SPATIAL else self.n_ci * self.n_co
        if node.fused_add:
            counts["addend"] = self.n_h * self.n_co
        return counts

    def transfer_bytes(self) -> dict[str, int]:
        node = self.node
        body = node.body
        if node.kind == "fc":
            n_w = body.k_in * body.k_out + body.k_out
            return {"in": 2 * body.k_in, "weights": 2 * n_w, "out": 2}
        if node.kind == "ew":
            t = 2 * body.k_in * body.h_in * body.w_in
            return {"in": t, "out": t}
        out_bytes = 2 * body.k_out * node.h_out * node.w_out
        bytes_ = {"out": out_bytes}
        if self.scheme == SPATIAL:
            rows = 0
            for h0, h1 in self.h_ranges():
                r0, r1, _, _ = self.input_rows(h0, h1)
                rows += r1 - r0
            bytes_["in"] = 2 * body.k_in * rows * body.w_in
            bytes_["weights"] = 2 * (body.k_out * body.k_in * body.kh * body.kw
                                     + body.k_out)
        else:
            bytes_["in"] = 2 * body.k_in * body.h_in * body.w_in * self.n_co
            bytes_["weights"] = 2 * (body.k_out * body.k_in * body.kh * body.kw
                                     + body.k_out)
        if node.fused_add:
            bytes_["addend"] = out_bytes
        return bytes_

    @property
    def n_transfers(self) -> int:
        return sum(self.transfer_counts().values())

    @property
    def total_l2l1_bytes(self) -> int:
        return sum(self.transfer_bytes().values())


def _conv_buffers(node: NodeKernel, scheme: str, h_tile: int,
                  ci_tile: int, co_tile: int) -> dict[str, BufferSpec]:
    body = node.body
    pad = body.kw // 2
    n_h = _ceil_div(node.h_out, h_tile) if scheme == SPATIAL else 1
    n_ci = _ceil_div(body.k_in, ci_tile)
    n_co = _ceil_div(body.k_out, co_tile)
    bufs: dict[str, BufferSpec] = {}
    w_padded = body.w_in + 2 * pad

    if scheme == SPATIAL:
        conv_h = 2 * h_tile if node.fused_pool else h_tile
        conv_h = min(conv_h, body.conv_h_out)
        stripe_rows = (conv_h - 1) * body.stride + body.kh
        bufs["in"] = BufferSpec(_align4(2 * ci_tile * stripe_rows * w_padded),
                                double=n_h * n_ci > 1)
        bufs["weights"] = BufferSpec(
            _align4(2 * (body.k_out * body.k_in * body.kh * body.kw + body.k_out)))
        bufs["out"] = BufferSpec(_align4(2 * body.k_out * h_tile * node.w_out),
                                 double=n_h > 1)
        if n_ci > 1:
            bufs["acc"] = BufferSpec(_align4(4 * body.k_out * conv_h * body.conv_w_out))
        if node.fused_pool:
            # conv rows for one channel staged before pooling
            bufs["pool"] = BufferSpec(_align4(2 * conv_h * body.conv_w_out))
        if node.fused_add:
            bufs["addend"] = BufferSpec(_align4(2 * body.k_out * h_tile * node.w_out),
                                        double=n_h > 1)
    else:
        h_padded = body.h_in + 2 * (body.kh // 2)
        bufs["in"] = BufferSpec(_align4(2 * ci_tile * h_padded * w_padded),
                                double=n_ci * n_co > 1)
        bufs["weights"] = BufferSpec(
            _align4(2 * (co_tile * ci_tile * body.kh * body.kw + co_tile)),
            double=n_ci * n_co > 1)
        bufs["out"] = BufferSpec(_align4(2 * co_tile * node.h_out * node.w_out),
                                 double=n_co > 1)
        if n_ci > 1:
            bufs["acc"] = BufferSpec(
                _align4(4 * co_tile * body.conv_h_out * body.conv_w_out))
        if node.fused_pool:
            bufs["pool"] = BufferSpec(_align4(2 * body.conv_h_out * body.conv_w_out))
        if node.fused_add:
            bufs["addend"] = BufferSpec(_align4(2 * co_tile * node.h_out * node.w_out),
                                        double=n_co > 1)
    return bufs


def _make_plan(node, scheme, h_tile, ci_tile, co_tile, budget):
    body = node.body
    if node.kind == "conv":
        bufs = _conv_buffers(node, scheme, h_tile, ci_tile, co_tile)
        n_h = _ceil_div(node.h_out, h_tile) if scheme == SPATIAL else 1
        n_ci = _ceil_div(body.k_in, ci_tile)
        n_co = _ceil_div(body.k_out, co_tile)
        if node.fused_pool and n_ci > 1:
            return None  # pooled epilogue requires a single-pass accumulation
    elif node.kind == "ew":
        if scheme == SPATIAL:
            tile = _align4(2 * body.k_in * h_tile * body.w_in)
            bufs = {"io": BufferSpec(tile, double=_ceil_div(body.h_in, h_tile) > 1)}
            n_h, n_ci, n_co = _ceil_div(body.h_in, h_tile), 1, 1
            ci_tile = body.k_in
        else:
            tile = _align4(2 * ci_tile * body.h_in * body.w_in)
            bufs = {"io": BufferSpec(tile, double=_ceil_div(body.k_in, ci_tile) > 1)}
            n_h, n_ci, n_co = 1, _ceil_div(body.k_in, ci_tile), 1
            h_tile = body.h_in
        co_tile = ci_tile
    else:  # fc
        n_ci = _ceil_div(body.k_in, ci_tile)
        db = n_ci > 1
        bufs = {"in": BufferSpec(_align4(2 * ci_tile), double=db),
                "weights": BufferSpec(_align4(2 * (ci_tile + 1)), double=db),
                "acc": BufferSpec(4), "out": BufferSpec(4)}
        n_h, n_co, h_tile, co_tile = 1, 1, 1, 1
    plan = TilePlan(node, scheme, h_tile, n_h, ci_tile, n_ci, co_tile, n_co,
                    bufs, budget)
    if plan.footprint > budget:
        return None
    return plan


def enumerate_tilings(node: NodeKernel, l1_budget: int, scheme: str) -> list[TilePlan]:
    """All feasible tile-extent combinations for one scheme.

    Raises InfeasibleError when even the smallest tile busts the budget (or
    the scheme does not apply to the node kind).
    """
    body = node.body
    plans: list[TilePlan] = []
    if node.kind == "conv":
        if scheme == SPATIAL:
            for h_tile in range(1, node.h_out + 1):
                for ci_tile in range(1, body.k_in + 1):
                    p = _make_plan(node, scheme, h_tile, ci_tile, body.k_out, l1_budget)
                    if p:
                        plans.append(p)
        else:
            for co_tile in range(1, body.k_out + 1):
                for ci_tile in range(1, body.k_in + 1):
                    p = _make_plan(node, scheme, node.h_out, ci_tile, co_tile, l1_budget)
                    if p:
                        plans.append(p)
    elif node.kind == "ew":
        if scheme == SPATIAL:
            for h_tile in range(1, body.h_in + 1):
                p = _make_plan(node, scheme, h_tile, body.k_in, body.k_in, l1_budget)
                if p:
                    plans.append(p)
        else:
            for ci_tile in range(1, body.k_in + 1):
                p = _make_plan(node, scheme, body.h_in, ci_tile, ci_tile, l1_budget)
                if p:
                    plans.append(p)
    else:
        if scheme == FEATUREWISE:
            for ci_tile in range(1, body.k_in + 1):
                p = _make_plan(node, scheme, 1, ci_tile, 1, l1_budget)
                if p:
                    plans.append(p)
    if not plans:
        raise InfeasibleError(f"{node.name}: infeasible under {l1_budget} byte budget "
                              f"({scheme})")
    return plans


def plan_layer(node: NodeKernel, l1_budget: int = DEFAULT_L1_BUDGET,
               calib=None) -> TilePlan:
    """Min-cost feasible plan; ties broken by fewer tiles, larger stripes,
    then spatial over feature-wise."""
    from . import cost as cost_mod
    calib = calib or cost_mod.DEFAULT_CALIB
    candidates: list[TilePlan] = []
    errors = []
    for scheme in (SPATIAL, FEATUREWISE):
        try:
            candidates.extend(enumerate_tilings(node, l1_budget, scheme))
        except InfeasibleError as e:
            errors.append(e)
    if not candidates:
        raise InfeasibleError(str(errors[0]))
    for p in candidates:
        p.est_cycles = cost_mod.plan_cycles(p, calib)
    candidates.sort(key=lambda p: (p.est_cycles, p.n_tiles, -p.h_tile,
                                   0 if p.scheme == SPATIAL else 1))
    return candidates[0]


@dataclass
class TileSchedule:
    graph: net.NetworkGraph
    l1_budget: int
    plans: list[TilePlan]
    l2: object = None   # L2AllocPlan, attached by the executor or caller

    def plan_for(self, node_name: str) -> TilePlan:
        for p in self.plans:
            if p.node.name == node_name:
                return p
        raise KeyError(node_name)


def plan_network(graph: net.NetworkGraph, l1_budget: int = DEFAULT_L1_BUDGET,
                 calib=None) -> TileSchedule:
    plans = []
    for node in node_kernels(graph):
        try:
            plans.append(plan_layer(node, l1_budget, calib))
        except InfeasibleError as e:
            raise InfeasibleError(f"{node.name}: {e}") from e
    return TileSchedule(graph, l1_budget, plans)


def schedule_summary(schedule: TileSchedule, csv: bool = False) -> str:
    header = ("node", "scheme", "h_tile", "ci", "co", "tiles",
              "l1_bytes", "xfer_bytes", "est_cycles")
    rows = []
    for p in schedule.plans:
        rows.append((p.node.name, p.scheme, p.h_tile, p.ci_tile, p.co_tile,
                     p.n_tiles, p.footprint, p.total_l2l1_bytes,
                     int(p.est_cycles or 0)))
    if csv:
        return "\n".join([",".join(header)] +
                         [",".join(str(c) for c in r) for r in rows])
    fmt = "{:<16} {:<13} {:>6} {:>4} {:>4} {:>6} {:>9} {:>10} {:>11}"
    return "\n".join([fmt.format(*header)] + [fmt.format(*r) for r in rows])
