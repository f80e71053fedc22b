"""Two-stack L2 allocation planning over the node-kernel execution order.

Buffers live in linear allocation stacks: a buffer can only be released while
it sits on top of its stack, so a dead buffer buried under a live one keeps
its bytes until the cover is freed (frees cascade).  Weights are allocated
just before their layer and released just after it; feature-map lifetimes
follow the residual bypasses, which is why each residual block holds three
tensors at once.  Elementwise nodes run in place and allocate nothing.

plan_two_stack searches every stack assignment of the activation buffers
(weights ride on their layer's output stack) and keeps the one with the
smallest peak total occupancy.  plan_single_stack runs the same lifetime
rules with one stack, which is what makes the two-stack layout worthwhile.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from . import net, tiler

L2_BYTES = 512 * 1024
MAX_SEARCH_BUFFERS = 20


@dataclass(frozen=True)
class AllocEvent:
    step: int
    action: str          # "alloc" | "free"
    buffer: str
    stack: int
    bytes: int


@dataclass
class L2AllocPlan:
    n_stacks: int
    events: list[AllocEvent]
    step_names: list[str]
    assignment: dict[str, int]          # activation buffer -> stack
    buffer_bytes: dict[str, int]
    peak_bytes: int
    stack_peaks: tuple[int, ...]
    occupancy: list[tuple[int, ...]]    # per step, after its frees

    @property
    def headroom(self) -> int:
        return L2_BYTES - self.peak_bytes


def _align4(n: int) -> int:
    return (n + 3) & ~3


@dataclass
class _Lifetimes:
    nodes: list[tiler.NodeKernel]
    alias: dict[str, str]               # tensor -> backing buffer
    buffers: list[str]                  # activation buffers in alloc order
    sizes: dict[str, int]
    alloc_step: dict[str, int]
    last_use: dict[str, int]
    weights: dict[int, tuple[str, int]] # step -> (weight buffer, bytes)
    consumes: dict[int, list[str]]      # step -> buffers read


def _lifetimes(graph: net.NetworkGraph) -> _Lifetimes:
    nodes = tiler.node_kernels(graph)
    if not nodes:       # nothing to execute, nothing to stage
        return _Lifetimes([], {}, [], {}, {}, {}, {}, {})
    alias = {net.INPUT_TENSOR: net.INPUT_TENSOR}
    buffers = [net.INPUT_TENSOR]
    k, h, w = graph.tensors[net.INPUT_TENSOR]
    sizes = {net.INPUT_TENSOR: _align4(2 * k * h * w)}
    alloc_step = {net.INPUT_TENSOR: -1}
    last_use: dict[str, int] = {net.INPUT_TENSOR: -1}
    weights: dict[int, tuple[str, int]] = {}
    consumes: dict[int, list[str]] = {}

    for i, node in enumerate(nodes):
        reads = [alias[node.input]]
        if node.addend:
            reads.append(alias[node.addend])
        consumes[i] = reads
        for b in reads:
            last_use[b] = i
        if node.kind == "ew":
            # in place: the output tensor shares its input's buffer
            alias[node.output] = alias[node.input]
        else:
            buf = node.output
            k, h, w = graph.tensors[node.output]
            sizes[buf] = _align4(2 * k * h * w)
            alias[node.output] = buf
            buffers.append(buf)
            alloc_step[buf] = i
            last_use[buf] = i
            spec = node.body
            n_params = spec.k_out * spec.k_in * spec.kh * spec.kw + spec.k_out
            weights[i] = (f"w:{node.name}", _align4(2 * n_params))
    n = len(nodes)
    for head in ("fully_1", "fully_2"):
        last_use[head] = n                      # results handed over at mission end
    return _Lifetimes(nodes, alias, buffers, sizes, alloc_step, last_use,
                      weights, consumes)


def _simulate(life: _Lifetimes, stack_of: dict[str, int], n_stacks: int,
              record: bool) -> tuple[int, tuple[int, ...], list, list]:
    stacks: list[list[str]] = [[] for _ in range(n_stacks)]
    occ = [0] * n_stacks
    peak_total = 0
    peaks = [0] * n_stacks
    events: list[AllocEvent] = []
    occupancy: list[tuple[int, ...]] = []

    def bump():
        nonlocal peak_total
        peak_total = max(peak_total, sum(occ))
        for s in range(n_stacks):
            peaks[s] = max(peaks[s], occ[s])

    def alloc(step, name, size, stack):
        stacks[stack].append(name)
        occ[stack] += size
        if record:
            events.append(AllocEvent(step, "alloc", name, stack, size))
        bump()

    # input frame sits in L2 before the first node runs
    if life.buffers:
        alloc(-1, net.INPUT_TENSOR, life.sizes[net.INPUT_TENSOR],
              stack_of[net.INPUT_TENSOR])
    n = len(life.nodes)
    for i in range(n + 1):
        if i < n:
            node = life.nodes[i]
            out_buf = node.output if node.kind != "ew" else None
            if out_buf is not None:
                alloc(i, out_buf, life.sizes[out_buf], stack_of[out_buf])
            if i in life.weights:
                wname, wsize = life.weights[i]
                wstack = stack_of[out_buf] if out_buf else stack_of[life.alias[node.input]]
                stacks[wstack].append(wname)
                occ[wstack] += wsize
                if record:
                    events.append(AllocEvent(i, "alloc", wname, wstack, wsize))
                bump()
                # layer executes here; weights released right after
                stacks[wstack].pop()
                occ[wstack] -= wsize
                if record:
                    events.append(AllocEvent(i, "free", wname, wstack, wsize))
        # release whatever is dead and exposed, most recent first
        for s in range(n_stacks):
            while stacks[s] and life.last_use[stacks[s][-1]] <= i:
                name = stacks[s].pop()
                occ[s] -= life.sizes[name]
                if record:
                    events.append(AllocEvent(i, "free", name, s, life.sizes[name]))
        if record:
            occupancy.append(tuple(occ))
    return peak_total, tuple(peaks), events, occupancy


def plan_two_stack(graph: net.NetworkGraph) -> L2AllocPlan:
    """Exhaustive stack assignment minimizing peak total occupancy."""
    life = _lifetimes(graph)
    if len(life.buffers) > MAX_SEARCH_BUFFERS:
        raise ValueError(f"{len(life.buffers)} buffers: assignment search too large")
    best = None
    for bits in itertools.product((0, 1), repeat=len(life.buffers)):
        stack_of = dict(zip(life.buffers, bits))
        peak, peaks, _, _ = _simulate(life, stack_of, 2, record=False)
        key = (peak, max(peaks), bits)
        if best is None or key < best[0]:
            best = (key, stack_of)
    stack_of = best[1]
    peak, peaks, events, occupancy = _simulate(life, stack_of, 2, record=True)
    names = [n.name for n in life.nodes] + ["end"]
    return L2AllocPlan(2, events, names, stack_of, dict(life.sizes),
                       peak, peaks, occupancy)


def plan_single_stack(graph: net.NetworkGraph) -> L2AllocPlan:
    """Same lifetime rules collapsed onto one linear stack."""
    life = _lifetimes(graph)
    stack_of = {b: 0 for b in life.buffers}
    peak, peaks, events, occupancy = _simulate(life, stack_of, 1, record=True)
    names = [n.name for n in life.nodes] + ["end"]
    return L2AllocPlan(1, events, names, stack_of, dict(life.sizes),
                       peak, peaks, occupancy)


def validate_plan(plan: L2AllocPlan, graph: net.NetworkGraph) -> list[str]:
    """Independent replay: LIFO order, dependency liveness, capacity, peaks."""
    life = _lifetimes(graph)
    violations: list[str] = []
    stacks: list[list[str]] = [[] for _ in range(plan.n_stacks)]
    sizes: dict[str, int] = {}
    occ = [0] * plan.n_stacks
    peak = 0
    peaks = [0] * plan.n_stacks
    by_step: dict[int, list[AllocEvent]] = {}
    for ev in plan.events:
        by_step.setdefault(ev.step, []).append(ev)

    live: set[str] = set()
    n = len(life.nodes)
    for step in range(-1, n + 1):
        step_events = by_step.get(step, [])

        def apply(ev):
            if ev.action == "alloc":
                stacks[ev.stack].append(ev.buffer)
                sizes[ev.buffer] = ev.bytes
                live.add(ev.buffer)
                occ[ev.stack] += ev.bytes
                nonlocal peak
                peak = max(peak, sum(occ))
                peaks[ev.stack] = max(peaks[ev.stack], occ[ev.stack])
            else:
                if not stacks[ev.stack] or stacks[ev.stack][-1] != ev.buffer:
                    top = stacks[ev.stack][-1] if stacks[ev.stack] else None
                    violations.append(f"step {step}: free of {ev.buffer} but "
                                      f"stack {ev.stack} top is {top}")
                    if ev.buffer in stacks[ev.stack]:
                        stacks[ev.stack].remove(ev.buffer)
                else:
                    stacks[ev.stack].pop()
                live.discard(ev.buffer)
                occ[ev.stack] -= ev.bytes

        # a step's event list is its allocations followed by its releases;
        # the node executes in between, so liveness is checked there
        i = 0
        while i < len(step_events) and step_events[i].action == "alloc":
            apply(step_events[i])
            i += 1
        if 0 <= step < n:
            for b in life.consumes[step]:
                if b not in live:
                    ever = any(e.buffer == b and e.action == "alloc"
                               for e in plan.events)
                    what = "already freed" if ever else "never allocated"
                    violations.append(f"step {step}: consumed {b} {what}")
            if step in life.weights:
                wname = life.weights[step][0]
                if wname not in live:
                    violations.append(f"step {step}: weights {wname} not staged")
        while i < len(step_events):
            apply(step_events[i])
            i += 1
    if peak != plan.peak_bytes:
        violations.append(f"recomputed peak {peak} != recorded {plan.peak_bytes}")
    if tuple(peaks) != tuple(plan.stack_peaks):
        violations.append(f"recomputed stack peaks {peaks} != {plan.stack_peaks}")
    if plan.n_stacks == 2 and peak > L2_BYTES:
        violations.append(f"peak {peak} exceeds L2 capacity {L2_BYTES}")
    return violations


def plan_summary(plan: L2AllocPlan, csv: bool = False) -> str:
    """Per-step table of live buffers per stack, mirroring the allocation sequence."""
    life_rows = []
    stacks: list[list[AllocEvent]] = [[] for _ in range(plan.n_stacks)]
    by_step: dict[int, list[AllocEvent]] = {}
    for ev in plan.events:
        by_step.setdefault(ev.step, []).append(ev)
    n_steps = len(plan.step_names)
    for step in range(-1, n_steps):
        for ev in by_step.get(step, []):
            if ev.action == "alloc":
                stacks[ev.stack].append(ev)
            else:
                stacks[ev.stack] = [e for e in stacks[ev.stack] if e.buffer != ev.buffer]
        if step < 0 or step >= n_steps:
            continue
        row = [plan.step_names[step]]
        for s in range(plan.n_stacks):
            row.append(" ".join(e.buffer for e in stacks[s]))
            row.append(sum(e.bytes for e in stacks[s]))
        life_rows.append(row)
    if csv:
        head = ["step"]
        for s in range(plan.n_stacks):
            head += [f"stack{s}", f"stack{s}_bytes"]
        lines = [",".join(head)]
        for row in life_rows:
            lines.append(",".join(f'"{c}"' if isinstance(c, str) and " " in c else str(c)
                                  for c in row))
        return "\n".join(lines)
    lines = []
    for row in life_rows:
        lines.append(f"{row[0]:<18}" + "  ".join(
            f"S{s}[{row[1 + 2 * s]:<48}] {row[2 + 2 * s]:>7}"
            for s in range(plan.n_stacks)))
    lines.append(f"peak {plan.peak_bytes} bytes "
                 f"({plan.peak_bytes / 1024:.1f} KB), "
                 f"headroom {plan.headroom} bytes")
    return "\n".join(lines)
