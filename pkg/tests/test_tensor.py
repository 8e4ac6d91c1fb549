import struct

import numpy as np
import pytest

from dimquant import (
    NpyError,
    NpyFortranOrderError,
    NpyTruncatedError,
    NpyUnsupportedDtypeError,
    NpyWrongNdimError,
    NumericError,
    ShapeError,
    Tensor2D,
    forward,
    forward_call_count,
    mse,
    npy_read,
    npy_write,
)


def naive_forward(w, x):
    """Triple-loop reference, float64, ascending inner index."""
    t, ic = x.shape
    oc = w.shape[0]
    out = np.zeros((t, oc))
    for ti in range(t):
        for o in range(oc):
            acc = 0.0
            for i in range(ic):
                acc += float(x[ti, i]) * float(w[o, i])
            out[ti, o] = acc
    return out.astype(np.float32)


class TestTensor2D:
    def test_coerces_to_float32_c_order(self):
        t = Tensor2D(np.asfortranarray(np.ones((3, 2), dtype=np.float64)))
        assert t.data.dtype == np.float32
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.shape == (3, 2) and t.rows == 3 and t.cols == 2

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ShapeError):
            Tensor2D(np.zeros(4, dtype=np.float32))
        with pytest.raises(ShapeError):
            Tensor2D(np.zeros((2, 2, 2), dtype=np.float32))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            Tensor2D([[1.0, np.nan]])
        with pytest.raises(NumericError):
            Tensor2D([[np.inf, 0.0]])


class TestForward:
    def test_identity(self):
        y = forward(Tensor2D(np.eye(2)), Tensor2D([[3.0, 4.0]]))
        assert y.data.tolist() == [[3.0, 4.0]]

    def test_zero_weights(self):
        y = forward(Tensor2D(np.zeros((3, 2))), Tensor2D([[5.0, 6.0], [1.0, 2.0]]))
        assert not y.data.any()

    def test_hand_case(self):
        y = forward(Tensor2D([[1.0, 2.0], [3.0, 4.0]]), Tensor2D([[1.0, 1.0], [2.0, 0.0]]))
        assert y.data.tolist() == [[3.0, 7.0], [2.0, 6.0]]

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        w = Tensor2D(rng.standard_normal((7, 11)))
        x = Tensor2D(rng.standard_normal((5, 11)))
        got = forward(w, x).data
        want = naive_forward(w.data, x.data)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-7)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4\)"):
            forward(Tensor2D(np.zeros((2, 3))), Tensor2D(np.zeros((2, 4))))

    def test_linearity(self):
        rng = np.random.default_rng(4)
        w = Tensor2D(rng.uniform(-1e3, 1e3, (6, 8)))
        x1 = rng.uniform(-1e3, 1e3, (4, 8))
        x2 = rng.uniform(-1e3, 1e3, (4, 8))
        a, b = 0.5, -2.0
        lhs = forward(w, Tensor2D(a * x1 + b * x2)).data
        rhs = a * forward(w, Tensor2D(x1)).data + b * forward(w, Tensor2D(x2)).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-2)

    def test_deterministic_bits(self):
        rng = np.random.default_rng(5)
        w = Tensor2D(rng.standard_normal((16, 32)))
        x = Tensor2D(rng.standard_normal((8, 32)))
        a = forward(w, x).data
        b = forward(w, x).data
        assert np.array_equal(a, b)

    def test_call_counter_increments(self):
        w = Tensor2D(np.eye(2))
        x = Tensor2D(np.ones((1, 2)))
        before = forward_call_count()
        forward(w, x)
        forward(w, x)
        assert forward_call_count() == before + 2


class TestMse:
    def test_equal_is_zero(self):
        a = Tensor2D([[1.5, -2.0], [0.0, 3.0]])
        assert mse(a, a) == 0.0

    def test_constant_offset(self):
        a = Tensor2D(np.zeros((3, 4)))
        b = Tensor2D(np.full((3, 4), 0.5))
        assert mse(a, b) == 0.25

    def test_hand_case(self):
        assert mse(Tensor2D([[1.0, 2.0]]), Tensor2D([[0.0, 4.0]])) == 2.5

    def test_zero_iff_equal_values(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((4, 4)).astype(np.float32)
        b = a.copy()
        b[2, 2] = np.nextafter(b[2, 2], np.float32(10))
        assert mse(Tensor2D(a), Tensor2D(a.copy())) == 0.0
        assert mse(Tensor2D(a), Tensor2D(b)) > 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(Tensor2D(np.zeros((1, 2))), Tensor2D(np.zeros((2, 1))))


def _craft_npy(path, descr="'<f4'", fortran="False", shape="(2, 2)", payload=b"\x00" * 16):
    header = f"{{'descr': {descr}, 'fortran_order': {fortran}, 'shape': {shape}, }}"
    pad = 64 - (10 + len(header) + 1) % 64
    header = header + " " * (pad % 64) + "\n"
    with open(path, "wb") as f:
        f.write(b"\x93NUMPY\x01\x00")
        f.write(struct.pack("<H", len(header)))
        f.write(header.encode("latin-1"))
        f.write(payload)


class TestNpyIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        t = Tensor2D(rng.standard_normal((3, 5)))
        p = tmp_path / "t.npy"
        npy_write(p, t)
        back = npy_read(p)
        assert np.array_equal(
            t.data.view(np.uint32), back.data.view(np.uint32)
        )

    def test_roundtrip_signed_zero_and_subnormal(self, tmp_path):
        vals = np.array([[0.0, -0.0], [1e-45, -1e-45]], dtype=np.float32)
        p = tmp_path / "z.npy"
        npy_write(p, Tensor2D(vals))
        back = npy_read(p)
        assert np.array_equal(vals.view(np.uint32), back.data.view(np.uint32))

    def test_numpy_can_read_our_files(self, tmp_path):
        t = Tensor2D([[1.0, 2.0], [3.0, 4.0]])
        p = tmp_path / "interop.npy"
        npy_write(p, t)
        assert np.array_equal(np.load(p), t.data)

    def test_reads_numpy_written_files(self, tmp_path):
        arr = np.arange(6, dtype="<f4").reshape(2, 3)
        p = tmp_path / "np.npy"
        np.save(p, arr)
        assert np.array_equal(npy_read(p).data, arr)

    def test_wrong_ndim(self, tmp_path):
        p = tmp_path / "one_d.npy"
        _craft_npy(p, shape="(4,)", payload=b"\x00" * 16)
        with pytest.raises(NpyWrongNdimError):
            npy_read(p)

    def test_unsupported_dtype(self, tmp_path):
        p = tmp_path / "f8.npy"
        _craft_npy(p, descr="'<f8'", payload=b"\x00" * 32)
        with pytest.raises(NpyUnsupportedDtypeError):
            npy_read(p)

    def test_fortran_order(self, tmp_path):
        p = tmp_path / "fortran.npy"
        _craft_npy(p, fortran="True")
        with pytest.raises(NpyFortranOrderError):
            npy_read(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short.npy"
        _craft_npy(p, payload=b"\x00" * 10)
        with pytest.raises(NpyTruncatedError):
            npy_read(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "long.npy"
        _craft_npy(p, payload=b"\x00" * 20)
        with pytest.raises(NpyError):
            npy_read(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.npy"
        p.write_bytes(b"NOTNPY\x01\x00" + b"\x00" * 32)
        with pytest.raises(NpyError):
            npy_read(p)

    def test_unsupported_version(self, tmp_path):
        p = tmp_path / "v2.npy"
        _craft_npy(p)
        raw = bytearray(p.read_bytes())
        raw[6] = 2
        p.write_bytes(bytes(raw))
        with pytest.raises(NpyError, match="version"):
            npy_read(p)

    def test_non_finite_payload_rejected(self, tmp_path):
        p = tmp_path / "nan.npy"
        payload = np.array([[1.0, np.nan], [0.0, 0.0]], dtype="<f4").tobytes()
        _craft_npy(p, payload=payload)
        with pytest.raises(NumericError):
            npy_read(p)
