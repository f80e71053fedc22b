import dataclasses

import pytest

from nanotile import l2plan, net

KB = 1024

# live set forced by data dependencies while conv_9 runs, from tensor shapes:
# RES3 input (64x13x13) + conv_8 out + conv_9 out (128x7x7 each) + conv_9 weights
CONV9_LIVE = (2 * 64 * 13 * 13) + 2 * (2 * 128 * 7 * 7) + 2 * (128 * 128 * 9 + 128)


@pytest.fixture(scope="module")
def graph():
    return net.build_dronet()


@pytest.fixture(scope="module")
def two(graph):
    return l2plan.plan_two_stack(graph)


@pytest.fixture(scope="module")
def one(graph):
    return l2plan.plan_single_stack(graph)


def test_two_stack_peak_band(two):
    assert 333 * KB <= two.peak_bytes <= 407 * KB
    assert two.headroom >= 100 * KB
    # the dependency-forced live set at conv_9 is a hard lower bound the
    # search achieves exactly
    assert two.peak_bytes == CONV9_LIVE == 341_888


def test_single_stack_peak_band(one):
    assert 598 * KB <= one.peak_bytes <= 732 * KB
    assert one.peak_bytes > 512 * KB            # infeasible on-chip
    # burial under LIFO keeps every earlier feature map alive through conv_9
    acts = (2 * 200 * 200 + 2 * 32 * 50 * 50 + 3 * (2 * 32 * 25 * 25)
            + 3 * (2 * 64 * 13 * 13) + 2 * (2 * 128 * 7 * 7))
    w9 = 2 * (128 * 128 * 9 + 128)
    assert one.peak_bytes == acts + w9 == 745_152


def test_two_never_worse_than_one(two, one):
    assert two.peak_bytes <= one.peak_bytes


def test_plans_validate(graph, two, one):
    assert l2plan.validate_plan(two, graph) == []
    assert l2plan.validate_plan(one, graph) == []


def test_weights_live_only_around_their_layer(two):
    open_w = {}
    for ev in two.events:
        if not ev.buffer.startswith("w:"):
            continue
        if ev.action == "alloc":
            open_w[ev.buffer] = ev.step
        else:
            assert ev.step == open_w.pop(ev.buffer)   # freed within the same step
    assert not open_w


def test_lifo_violation_detected(graph, two):
    # swap two frees on the same stack so one targets a buried buffer
    events = list(two.events)
    frees = [i for i, e in enumerate(events)
             if e.action == "free" and not e.buffer.startswith("w:")]
    i, j = None, None
    for a in frees:
        for b in frees:
            if (a < b and events[a].stack == events[b].stack
                    and events[a].step == events[b].step):
                i, j = a, b
                break
        if i is not None:
            break
    assert i is not None, "expected a cascading free pair"
    events[i], events[j] = events[j], events[i]
    tampered = dataclasses.replace(two, events=events)
    assert any("free of" in v for v in l2plan.validate_plan(tampered, graph))


def test_early_free_of_bypass_tensor_detected(graph, two):
    # freeing the RES1 bypass operand before its join step breaks liveness
    events = []
    moved = None
    for ev in two.events:
        if ev.buffer == "conv_3" and ev.action == "free":
            moved = ev
            continue
        events.append(ev)
    assert moved is not None
    early = dataclasses.replace(moved, step=3)
    out = []
    inserted = False
    for ev in events:
        out.append(ev)
        if not inserted and ev.step == 3 and ev.action == "alloc":
            out.append(early)
            inserted = True
    tampered = dataclasses.replace(two, events=out)
    violations = l2plan.validate_plan(tampered, graph)
    assert any("conv_3" in v for v in violations)


def test_single_layer_graph_peak():
    # one conv: peak is input + output + weights, no stack interplay
    spec = net.LayerSpec("conv_1", net.CONV, (net.INPUT_TENSOR,), 1, 4, 3, 3, 1,
                         8, 8, 8, 8)
    g = net.NetworkGraph([spec])
    g.tensors[net.INPUT_TENSOR] = (1, 8, 8)
    g.tensors["conv_1"] = (4, 8, 8)
    plan = l2plan.plan_two_stack(g)
    expect = (2 * 64 + 3) // 4 * 4 + 2 * 4 * 64 + (2 * (4 * 9 + 4) + 3) // 4 * 4
    assert plan.peak_bytes == expect


def test_empty_graph():
    g = net.NetworkGraph([])
    g.tensors[net.INPUT_TENSOR] = (1, 8, 8)
    plan = l2plan.plan_single_stack(g)
    assert plan.peak_bytes == 0
    assert plan.events == []


def test_determinism(graph, two):
    again = l2plan.plan_two_stack(graph)
    assert again.assignment == two.assignment
    assert again.events == two.events


def test_summary_dump(two):
    text = l2plan.plan_summary(two)
    assert "peak 341888 bytes" in text
    csv = l2plan.plan_summary(two, csv=True)
    assert csv.splitlines()[0].startswith("step,stack0")
    assert len(csv.splitlines()) == 15          # 13 nodes + end + header
