import struct

import numpy as np
import pytest

from backpass import ntf, pngio
from backpass.hierarchy import HierarchySpec, micro, t3


class TestNtf:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(2, 3)), "b": np.array(4.5), "c": rng.normal(size=(1, 2, 2, 2))}
        ntf.save(tmp_path / "t.ntf", tensors, {"kind": "x"})
        back, meta = ntf.load(tmp_path / "t.ntf")
        assert list(back) == ["a", "b", "c"] and meta == {"kind": "x"}
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_layout(self):
        buf = ntf.dumps({"x": np.array([1.0, 2.0])})
        (n,) = struct.unpack("<Q", buf[:8])
        assert np.frombuffer(buf[8 + n:], dtype="<f8").tolist() == [1.0, 2.0]

    def test_bad_version(self):
        buf = ntf.dumps({"x": np.zeros(1)})
        (n,) = struct.unpack("<Q", buf[:8])
        hdr = buf[8:8 + n].replace(b'"schema_version": 1', b'"schema_version": 9')
        with pytest.raises(ValueError):
            ntf.loads(struct.pack("<Q", len(hdr)) + hdr + buf[8 + n:])

    def test_truncated(self):
        with pytest.raises(ValueError):
            ntf.loads(b"abc")

    def test_deterministic_bytes(self):
        t = {"w": np.arange(6.0).reshape(2, 3)}
        assert ntf.dumps(t, {"z": 1, "a": 2}) == ntf.dumps(t, {"a": 2, "z": 1})


class TestPng:
    def test_roundtrip_quantized(self, tmp_path):
        img = np.random.default_rng(1).random((1, 8, 8))
        pngio.save_gray(tmp_path / "i.png", img)
        back = pngio.load_gray(tmp_path / "i.png")
        assert back.shape == (1, 8, 8)
        np.testing.assert_allclose(back, np.round(img * 255) / 255, atol=1e-12)

    def test_clamps(self):
        np.testing.assert_array_equal(pngio.to_uint8(np.array([[-1.0, 0.5, 2.0]])), [[0, 128, 255]])

    def test_grid_shape(self):
        g = pngio.grid([np.zeros((1, 4, 4))] * 5, ncols=3, pad=1)
        assert g.shape == (2 * 5 + 1, 3 * 5 + 1)

    def test_bar_chart_heights(self):
        b = pngio.bar_chart([0.0, 1.0], bar_w=2, height=10)
        assert b[:, 3:5].sum() > b[:, 0:2].sum()


class TestHierarchy:
    def test_t3_shapes(self):
        s = t3()
        assert [l.shape for l in s.layers] == [(1, 32, 32), (8, 16, 16), (16, 8, 8), (32, 4, 4), (2, 1, 1)]
        assert [l.mixtures for l in s.layers[:4]] == [4, 4, 4, 16]
        assert [l.offset_range for l in s.layers[:4]] == [0, 1, 1, 2]
        assert s.L == 4 and s.num_categories == 2

    def test_offsets_lexicographic(self):
        offs = list(t3()[1].offsets())
        assert offs == sorted(offs) and len(offs) == 9

    def test_dict_roundtrip(self):
        s = micro(2)
        assert HierarchySpec.from_dict(s.to_dict()).to_dict() == s.to_dict()

    def test_bad_geometry(self):
        d = t3().to_dict()
        d["layers"][1]["height"] = 15
        with pytest.raises(ValueError):
            HierarchySpec.from_dict(d)
