"""Tiled execution over a simulated L1/L2/L3 hierarchy with explicit DMA events.

The executor replays a TileSchedule: L2 buffers come and go per the attached
two-stack allocation plan, tiles move through simulated L1 with logged DMA
transfers, and the arithmetic runs through the same exact kernels as the
untiled reference on tile views.  Partial sums for channel-split tiles stay
at accumulator scale between chunks and are renormalized once, so outputs are
bit-identical to the untiled engine; the residency simulation only enforces
capacities and records the trace.  Host accumulators are 64-bit for exactness
while the budget charges the 4-byte accumulator the target hardware would hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fxp, kernels, l2plan, net, tiler

L1_BYTES = 64 * 1024
L2_BYTES = 512 * 1024

TAG_L3_L2 = "L3->L2"
TAG_L2_L1 = "L2->L1"
TAG_L1_L2 = "L1->L2"
TAG_L2_L3 = "L2->L3"


class MemSimError(RuntimeError):
    pass


@dataclass(frozen=True)
class Event:
    kind: str            # "alloc" | "free" | "xfer" | "compute"
    region: str          # L1/L2 for alloc/free, tag for xfer, "" for compute
    node: str
    tile: int
    name: str            # buffer or stream name
    bytes: int
    macs: int = 0
    workers: tuple = ()
    overlap: bool = False


class TraceLog:
    def __init__(self):
        self.events: list[Event] = []

    def append(self, ev: Event):
        self.events.append(ev)

    def to_csv(self) -> str:
        lines = ["kind,region,node,tile,name,bytes,macs,workers,overlap"]
        for e in self.events:
            w = ";".join(f"{a}-{b}" for a, b in e.workers)
            lines.append(f"{e.kind},{e.region},{e.node},{e.tile},{e.name},"
                         f"{e.bytes},{e.macs},{w},{int(e.overlap)}")
        return "\n".join(lines)


class MemSim:
    """Capacity-checked allocation maps for the three memory levels."""

    def __init__(self, l1_bytes: int = L1_BYTES, l2_bytes: int = L2_BYTES,
                 trace: TraceLog | None = None):
        self.capacity = {"L1": l1_bytes, "L2": l2_bytes, "L3": None}
        self.live: dict[tuple[str, str], int] = {}
        self.used = {"L1": 0, "L2": 0, "L3": 0}
        self.peak = {"L1": 0, "L2": 0, "L3": 0}
        self.trace = trace if trace is not None else TraceLog()

    def alloc(self, region: str, name: str, nbytes: int, node: str = "", tile: int = -1):
        key = (region, name)
        if key in self.live:
            raise MemSimError(f"{region}:{name} already allocated")
        cap = self.capacity[region]
        if cap is not None and self.used[region] + nbytes > cap:
            raise MemSimError(f"{region} capacity exceeded: {self.used[region]} + "
                              f"{nbytes} > {cap} allocating {name}")
        self.live[key] = nbytes
        self.used[region] += nbytes
        self.peak[region] = max(self.peak[region], self.used[region])
        self.trace.append(Event("alloc", region, node, tile, name, nbytes))

    def free(self, region: str, name: str, node: str = ""):
        key = (region, name)
        if key not in self.live:
            raise MemSimError(f"free of dead buffer {region}:{name}")
        self.used[region] -= self.live.pop(key)
        self.trace.append(Event("free", region, node, -1, name, 0))

    def check_live(self, region: str, name: str):
        if (region, name) not in self.live:
            raise MemSimError(f"touch of dead buffer {region}:{name}")

    def transfer(self, tag: str, nbytes: int, src: tuple[str, str],
                 dst: tuple[str, str], node: str = "", tile: int = -1,
                 stream: str = "", overlap: bool = False):
        for region, name in (src, dst):
            if region != "L3":
                self.check_live(region, name)
        self.trace.append(Event("xfer", tag, node, tile, stream, nbytes,
                                overlap=overlap))

    def compute(self, node: str, tile: int, macs: int, workers):
        self.trace.append(Event("compute", "", node, tile, "", 0, macs,
                                tuple(workers)))


@dataclass
class ExecResult:
    steering: float
    collision_prob: float
    raw_steering: int
    raw_collision: int
    trace: TraceLog
    memsim: MemSim
    l2: l2plan.L2AllocPlan


def execute_schedule(schedule: tiler.TileSchedule, store: net.WeightStore,
                     image: np.ndarray, memsim: MemSim | None = None) -> ExecResult:
    graph = schedule.graph
    if schedule.l2 is None:
        schedule.l2 = l2plan.plan_two_stack(graph)
    plan_l2 = schedule.l2
    trace = TraceLog()
    ms = memsim or MemSim(trace=trace)
    ms.trace = trace
    life = l2plan._lifetimes(graph)
    nodes = life.nodes

    if image.shape != net.INPUT_SHAPE or image.dtype != np.int16:
        raise ValueError(f"input must be int16 {net.INPUT_SHAPE}")

    events_by_step: dict[int, list[l2plan.AllocEvent]] = {}
    for ev in plan_l2.events:
        events_by_step.setdefault(ev.step, []).append(ev)

    l2data: dict[str, np.ndarray] = {}

    def l2_allocs(step: int, node_name: str):
        for ev in events_by_step.get(step, []):
            if ev.action == "alloc" and not ev.buffer.startswith("w:"):
                ms.alloc("L2", ev.buffer, ev.bytes, node_name)

    def l2_frees(step: int, node_name: str):
        for ev in events_by_step.get(step, []):
            if ev.action == "free" and not ev.buffer.startswith("w:"):
                ms.free("L2", ev.buffer, node_name)
                l2data.pop(ev.buffer, None)

    # frame ingress: the camera path lands the image in L2 over the uDMA
    l2_allocs(-1, "frame")
    l2data[net.INPUT_TENSOR] = image.copy()
    ms.transfer(TAG_L3_L2, image.size * 2, ("L3", "camera"),
                ("L2", net.INPUT_TENSOR), "frame", stream="frame", overlap=True)

    heads: dict[str, int] = {}
    for i, node in enumerate(nodes):
        plan = schedule.plan_for(node.name)
        l2_allocs(i, node.name)
        wname = f"w:{node.name}"
        if i in life.weights:
            spec = node.body
            w_actual = 2 * (spec.k_out * spec.k_in * spec.kh * spec.kw + spec.k_out)
            ms.alloc("L2", wname, life.weights[i][1], node.name)
            ms.transfer(TAG_L3_L2, w_actual, ("L3", "weights"),
                        ("L2", wname), node.name, stream="weights")
        if node.kind != "ew":
            out_buf = node.output
            k, h, w_ = graph.tensors[node.output]
            l2data[out_buf] = np.zeros((k, h, w_), np.int16)

        # the plan's L1 working set is held for the whole node
        for bname, bspec in plan.buffers.items():
            ms.alloc("L1", f"{node.name}:{bname}", bspec.total, node.name)
        if node.kind == "conv":
            _run_conv(node, plan, life, l2data, ms, store, wname)
        elif node.kind == "ew":
            _run_ew(node, plan, life, l2data, ms)
        else:
            heads[node.output] = _run_fc(node, plan, life, l2data, ms, store, wname)
        for bname in plan.buffers:
            ms.free("L1", f"{node.name}:{bname}", node.name)

        if i in life.weights:
            ms.free("L2", wname, node.name)
        l2_frees(i, node.name)
    l2_frees(len(nodes), "end")

    steer_raw, coll_raw = heads["fully_1"], heads["fully_2"]
    return ExecResult(steer_raw / fxp.SCALE, kernels.sigmoid(coll_raw / fxp.SCALE),
                      steer_raw, coll_raw, trace, ms, plan_l2)


def _run_conv(node, plan, life, l2data, ms, store, wname):
    body = node.body
    w, b = store[body.name]
    x = l2data[life.alias[node.input]]
    out = l2data[node.output]
    addend_buf = life.alias[node.addend] if node.addend else None
    addend = l2data[addend_buf] if node.addend else None
    pad_w = body.kw // 2
    bias = (b.astype(np.int64) << fxp.FRAC_BITS)
    double_in = plan.buffers["in"].double
    w_spatial = plan.scheme == tiler.SPATIAL

    if w_spatial:
        ms.transfer(TAG_L2_L1, plan.transfer_bytes()["weights"], ("L2", wname),
                    ("L1", f"{node.name}:weights"), node.name, stream="weights")
        workers = plan.worker_ranges(node.w_out)
        tile_idx = 0
        for h0, h1 in plan.h_ranges():
            c0, c1 = plan.conv_rows(h0, h1)
            r0, r1, pa, pb = plan.input_rows(h0, h1)
            acc = None
            for j, (ci0, ci1) in enumerate(plan.ci_ranges()):
                stripe = np.zeros((ci1 - ci0, pa + (r1 - r0) + pb,
                                   body.w_in + 2 * pad_w), np.int16)
                stripe[:, pa:pa + (r1 - r0), pad_w:pad_w + body.w_in] = \
                    x[ci0:ci1, r0:r1, :]
                ms.transfer(TAG_L2_L1, 2 * (ci1 - ci0) * (r1 - r0) * body.w_in,
                            ("L2", life.alias[node.input]),
                            ("L1", f"{node.name}:in"), node.name, tile_idx,
                            "in", overlap=double_in and tile_idx > 0)
                part = kernels.conv_acc_on_padded(stripe, w[:, ci0:ci1], body.stride)
                acc = part if acc is None else acc + part
                macs = (body.k_out * (ci1 - ci0) * body.kh * body.kw
                        * (c1 - c0) * body.conv_w_out)
                ms.compute(node.name, tile_idx, macs, workers)
                tile_idx += 1
            acc += bias[:, None, None]
            _emit_tile(node, plan, l2data, ms, out, addend, addend_buf, acc,
                       h0, h1, 0, body.k_out, tile_idx - 1)
    else:
        x_padded = None
        tile_idx = 0
        n_streams = plan.n_ci * plan.n_co > 1
        for o0, o1 in plan.co_ranges():
            acc = None
            workers = plan.worker_ranges(o1 - o0)
            for j, (ci0, ci1) in enumerate(plan.ci_ranges()):
                pad_h = body.kh // 2
                xp = np.zeros((ci1 - ci0, body.h_in + 2 * pad_h,
                               body.w_in + 2 * pad_w), np.int16)
                xp[:, pad_h:pad_h + body.h_in, pad_w:pad_w + body.w_in] = x[ci0:ci1]
                ms.transfer(TAG_L2_L1, 2 * (ci1 - ci0) * body.h_in * body.w_in,
                            ("L2", life.alias[node.input]),
                            ("L1", f"{node.name}:in"), node.name, tile_idx,
                            "in", overlap=n_streams and tile_idx > 0)
                wb = 2 * ((o1 - o0) * (ci1 - ci0) * body.kh * body.kw
                          + ((o1 - o0) if j == 0 else 0))
                ms.transfer(TAG_L2_L1, wb, ("L2", wname),
                            ("L1", f"{node.name}:weights"), node.name, tile_idx,
                            "weights", overlap=n_streams and tile_idx > 0)
                part = kernels.conv_acc_on_padded(xp, w[o0:o1, ci0:ci1], body.stride)
                acc = part if acc is None else acc + part
                macs = ((o1 - o0) * (ci1 - ci0) * body.kh * body.kw
                        * body.conv_h_out * body.conv_w_out)
                ms.compute(node.name, tile_idx, macs, workers)
                tile_idx += 1
            acc += bias[o0:o1, None, None]
            _emit_tile(node, plan, l2data, ms, out, addend, addend_buf, acc,
                       0, node.h_out, o0, o1, tile_idx - 1)
    return out


def _emit_tile(node, plan, l2data, ms, out, addend, addend_buf, acc,
               h0, h1, o0, o1, tile_idx):
    """Renorm once, apply fused pool/add/relu, write the tile back to L2."""
    body = node.body
    tile = fxp.renorm_array(acc)
    if node.fused_pool:
        tile = kernels.maxpool2(tile)
    if body.fused_relu:
        tile = kernels.relu(tile)
    if node.addend is not None:
        other = addend[o0:o1, h0:h1, :]
        ms.transfer(TAG_L2_L1, other.size * 2,
                    ("L2", addend_buf), ("L1", f"{node.name}:addend"),
                    node.name, tile_idx, "addend")
        join = node.rows[1]
        relu_after = join.fused_relu or len(node.rows) > 2
        tile = kernels.add(tile, other, fused_relu=relu_after)
    out[o0:o1, h0:h1, :] = tile
    ms.transfer(TAG_L1_L2, tile.size * 2, ("L1", f"{node.name}:out"),
                ("L2", node.output), node.name, tile_idx, "out")


def _run_ew(node, plan, life, l2data, ms):
    buf = life.alias[node.input]
    x = l2data[buf]
    if plan.scheme == tiler.SPATIAL:
        ranges = [("h", h0, h1) for h0, h1 in plan.h_ranges()]
        workers = plan.worker_ranges(node.body.w_in)
    else:
        ranges = [("c", c0, c1) for c0, c1 in plan.ci_ranges()]
    for t, (axis, a0, a1) in enumerate(ranges):
        view = x[:, a0:a1, :] if axis == "h" else x[a0:a1]
        nbytes = view.size * 2
        ms.transfer(TAG_L2_L1, nbytes, ("L2", buf), ("L1", f"{node.name}:io"),
                    node.name, t, "in", overlap=plan.buffers["io"].double and t > 0)
        if axis == "c":
            workers = plan.worker_ranges(a1 - a0)
        ms.compute(node.name, t, 0, workers)
        view[...] = kernels.relu(view)
        ms.transfer(TAG_L1_L2, nbytes, ("L1", f"{node.name}:io"), ("L2", buf),
                    node.name, t, "out")


def _run_fc(node, plan, life, l2data, ms, store, wname):
    body = node.body
    w, b = store[body.name]
    src = life.alias[node.input]
    flat = l2data[src].ravel()
    wf = w.ravel()
    acc = int(b[0]) << fxp.FRAC_BITS
    for t, (c0, c1) in enumerate(plan.ci_ranges()):
        ms.transfer(TAG_L2_L1, 2 * (c1 - c0), ("L2", src),
                    ("L1", f"{node.name}:in"), node.name, t, "in",
                    overlap=plan.buffers["in"].double and t > 0)
        wb = 2 * (c1 - c0) + (2 if t == 0 else 0)
        ms.transfer(TAG_L2_L1, wb, ("L2", wname), ("L1", f"{node.name}:weights"),
                    node.name, t, "weights",
                    overlap=plan.buffers["weights"].double and t > 0)
        acc += int(np.dot(flat[c0:c1].astype(np.int64), wf[c0:c1].astype(np.int64)))
        ms.compute(node.name, t, c1 - c0, plan.worker_ranges(c1 - c0))
    raw = int(fxp.renorm_array(np.array([acc]))[0])
    l2data[node.output][0, 0, 0] = raw
    ms.transfer(TAG_L1_L2, 2, ("L1", f"{node.name}:out"), ("L2", node.output),
                node.name, 0, "out")
    return raw


@dataclass
class AuditReport:
    peak_l1: int
    peak_l2: int
    stream_bytes: dict[str, int]                    # by stream, all tags
    tag_bytes: dict[str, int]                       # by transfer tag
    tag_stream_bytes: dict[tuple[str, str], int]    # by (tag, stream)
    node_stream: dict[tuple[str, str], tuple[int, int]]  # L2<->L1 (count, bytes)
    n_events: int
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_trace(trace: TraceLog, memsim: MemSim | None = None) -> AuditReport:
    """Independent replay of the event log: recomputes peaks and byte totals
    without trusting the executor's own counters."""
    used = {"L1": 0, "L2": 0, "L3": 0}
    peak = {"L1": 0, "L2": 0, "L3": 0}
    live: dict[tuple[str, str], int] = {}
    stream_bytes: dict[str, int] = {}
    tag_bytes: dict[str, int] = {}
    tag_stream: dict[tuple[str, str], int] = {}
    node_stream: dict[tuple[str, str], tuple[int, int]] = {}
    violations = []
    for ev in trace.events:
        if ev.kind == "alloc":
            key = (ev.region, ev.name)
            if key in live:
                violations.append(f"double alloc {key}")
            live[key] = ev.bytes
            used[ev.region] += ev.bytes
            peak[ev.region] = max(peak[ev.region], used[ev.region])
        elif ev.kind == "free":
            key = (ev.region, ev.name)
            if key not in live:
                violations.append(f"free of dead {key}")
                continue
            used[ev.region] -= live.pop(key)
        elif ev.kind == "xfer":
            stream_bytes[ev.name] = stream_bytes.get(ev.name, 0) + ev.bytes
            tag_bytes[ev.region] = tag_bytes.get(ev.region, 0) + ev.bytes
            tag_stream[(ev.region, ev.name)] = \
                tag_stream.get((ev.region, ev.name), 0) + ev.bytes
            if ev.region in (TAG_L2_L1, TAG_L1_L2):
                c, b = node_stream.get((ev.node, ev.name), (0, 0))
                node_stream[(ev.node, ev.name)] = (c + 1, b + ev.bytes)
    if memsim is not None:
        for region in ("L1", "L2"):
            if peak[region] != memsim.peak[region]:
                violations.append(f"{region} peak mismatch: replay {peak[region]} "
                                  f"vs memsim {memsim.peak[region]}")
    return AuditReport(peak["L1"], peak["L2"], stream_bytes, tag_bytes,
                       tag_stream, node_stream, len(trace.events), violations)
