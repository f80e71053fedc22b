import numpy as np
import pytest

from nanotile import fxp, net

EXPECTED_CONV_MACS = {
    # k_in * k_out * kh * kw * h_out * w_out, recomputed here by hand
    "conv_1": 1 * 32 * 5 * 5 * 100 * 100,
    "conv_2": 32 * 32 * 3 * 3 * 25 * 25,
    "conv_3": 32 * 32 * 3 * 3 * 25 * 25,
    "conv_4": 32 * 32 * 1 * 1 * 25 * 25,
    "conv_5": 32 * 64 * 3 * 3 * 13 * 13,
    "conv_6": 64 * 64 * 3 * 3 * 13 * 13,
    "conv_7": 32 * 64 * 1 * 1 * 13 * 13,
    "conv_8": 64 * 128 * 3 * 3 * 7 * 7,
    "conv_9": 128 * 128 * 3 * 3 * 7 * 7,
    "conv_10": 64 * 128 * 1 * 1 * 7 * 7,
}


@pytest.fixture(scope="module")
def graph():
    return net.build_dronet()


def test_row_structure(graph):
    assert len(graph.layers) == 18
    kinds = [l.kind for l in graph.layers]
    assert kinds.count(net.CONV) == 10
    assert kinds.count(net.FC) == 2
    assert kinds.count(net.ADD) == 3
    assert sum(1 for l in graph.layers if l.fused_pool) == 1
    assert graph.tensors[net.INPUT_TENSOR] == (1, 200, 200)
    assert graph.tensors["add_2"] == (64, 13, 13)        # ceil(25/2) = 13
    assert graph.tensors["add_3"] == (128, 7, 7)
    assert graph.layer("fully_1").k_in == 6272


def test_bypass_edges_skip_two_conv_main_paths(graph):
    for join, byp, main in (("add_1", "conv_4", ("conv_2", "conv_3")),
                            ("add_2", "conv_7", ("conv_5", "conv_6")),
                            ("add_3", "conv_10", ("conv_8", "conv_9"))):
        spec = graph.layer(join)
        assert spec.inputs == (main[1], byp)
        assert graph.layer(byp).inputs == graph.layer(main[0]).inputs


def test_mac_count(graph):
    macs = net.mac_count(graph)
    for name, expect in EXPECTED_CONV_MACS.items():
        assert macs["per_layer"][name] == expect
    assert macs["per_layer"]["fully_1"] == 6272
    assert macs["per_layer"]["relu_1"] == 0
    assert macs["per_layer"]["add_1"] == 0
    assert macs["conv_total"] == sum(EXPECTED_CONV_MACS.values())
    assert 40_000_000 <= macs["conv_total"] <= 42_000_000
    assert macs["per_layer"]["conv_9"] == 7_225_344


def test_param_count(graph):
    params = net.param_count(graph)
    assert params["per_layer"]["conv_1"] == 32 * 25 + 32
    assert params["per_layer"]["fully_2"] == 6272 + 1
    assert params["total"] == 320_226
    assert params["bytes_4"] > 1 << 20            # > 1 MB: DRAM-resident
    assert params["bytes_2"] > 512 << 10          # > 512 KB: exceeds on-chip L2


def test_weight_round_trip(tmp_path, graph):
    store = net.random_store(graph, seed=3)
    p = tmp_path / "w.pdrn"
    net.save_weights(store, graph, str(p))
    again = net.load_weights(str(p), graph)
    assert again == store
    p2 = tmp_path / "w2.pdrn"
    net.save_weights(again, graph, str(p2))
    assert p.read_bytes() == p2.read_bytes()      # byte-identical re-save


def test_weight_file_errors(tmp_path, graph):
    store = net.random_store(graph, seed=0)
    p = tmp_path / "w.pdrn"
    net.save_weights(store, graph, str(p))
    blob = bytearray(p.read_bytes())

    bad = tmp_path / "bad.pdrn"
    bad.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(net.BadMagicError):
        net.load_weights(str(bad), graph)

    blob2 = bytearray(blob)
    blob2[4:6] = (99).to_bytes(2, "little")
    bad.write_bytes(bytes(blob2))
    with pytest.raises(net.VersionMismatchError):
        net.load_weights(str(bad), graph)

    bad.write_bytes(bytes(blob[:len(blob) // 2]))
    with pytest.raises(net.TruncatedFileError):
        net.load_weights(str(bad), graph)

    blob3 = bytearray(blob)
    blob3[9:11] = (7).to_bytes(2, "little")       # corrupt conv_1 k_in
    bad.write_bytes(bytes(blob3))
    with pytest.raises((net.ShapeMismatchError, net.TruncatedFileError)):
        net.load_weights(str(bad), graph)


def _write_pgm(path, img):
    h, w = img.shape
    path.write_bytes(b"P5\n# test frame\n%d %d\n255\n" % (w, h) +
                     img.astype(np.uint8).tobytes())


def test_load_image(tmp_path):
    p = tmp_path / "a.pgm"
    _write_pgm(p, np.zeros((200, 200)))
    t = net.load_image(str(p))
    assert t.shape == (1, 200, 200)
    assert not t.any()

    _write_pgm(p, np.full((240, 320), 255))
    t = net.load_image(str(p))
    assert t.shape == (1, 200, 200)
    assert (t == 4096).all()                      # 255/255 -> quantize(1.0)

    img = np.zeros((240, 320))
    img[:, :40] = 200                             # cropped away by center crop
    _write_pgm(p, img)
    t = net.load_image(str(p))
    assert not t.any()


def test_load_image_crop_maps_center(tmp_path):
    img = np.arange(240 * 320, dtype=np.int64).reshape(240, 320) % 251
    p = tmp_path / "c.pgm"
    _write_pgm(p, img)
    t = net.load_image(str(p))
    crop = img[:, 40:280]
    idx = (np.arange(200) * 240) // 200           # nearest-neighbor index map
    expect = fxp.quantize_array(crop[np.ix_(idx, idx)] / 255.0)
    assert np.array_equal(t[0], expect)


def test_load_image_errors(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n2 2\n255\n....")
    with pytest.raises(net.ImageFormatError, match="P5"):
        net.load_image(str(p))
    p.write_bytes(b"P5\n2 2\n65535\n\x00\x00\x00\x00")
    with pytest.raises(net.ImageFormatError, match="bit depth"):
        net.load_image(str(p))
    p.write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(net.ImageFormatError, match="short"):
        net.load_image(str(p))


def test_shape_propagation_fails_loudly():
    bad = net.LayerSpec("conv_1", net.CONV, (net.INPUT_TENSOR,), 1, 4, 3, 3, 2,
                        8, 8, 5, 5)                     # should be ceil(8/2) = 4
    g = net.NetworkGraph([bad])
    g.tensors[net.INPUT_TENSOR] = (1, 8, 8)
    g.tensors["conv_1"] = (4, 5, 5)
    with pytest.raises(ValueError, match="ceil"):
        net._validate(g)


def test_graph_summary(graph):
    text = net.graph_summary(graph)
    assert "conv_9" in text and "fully_2" in text
    csv = net.graph_summary(graph, csv=True)
    assert csv.splitlines()[0] == "layer,kind,in,out,kernel,stride,macs"
    assert len(csv.splitlines()) == 19
