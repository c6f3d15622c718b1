import numpy as np
import pytest

from anchorflow import formats
from anchorflow.errors import ChecksumError, FormatError


def test_fvt_roundtrip(tmp_path):
    arr = np.random.default_rng(0).random((3, 8, 32, 32, 3)).astype(np.float32)
    p = tmp_path / "x.fvt"
    formats.write_fvt(p, arr)
    back = formats.read_fvt(p)
    assert back.dtype == np.float32
    assert back.tobytes() == arr.tobytes()


def test_fvt_rewrite_is_byte_identical(tmp_path):
    arr = np.ones((2, 4, 4, 3), dtype=np.float32)
    formats.write_fvt(tmp_path / "a.fvt", arr)
    formats.write_fvt(tmp_path / "b.fvt", arr)
    assert (tmp_path / "a.fvt").read_bytes() == (tmp_path / "b.fvt").read_bytes()


def test_fvt_bad_magic(tmp_path):
    p = tmp_path / "bad.fvt"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        formats.read_fvt(p)


def test_fvt_truncated_raises_checksum(tmp_path):
    arr = np.zeros((4, 4, 3), dtype=np.float32)
    p = tmp_path / "t.fvt"
    formats.write_fvt(p, arr)
    blob = p.read_bytes()
    p.write_bytes(blob[:-10])
    with pytest.raises(ChecksumError):
        formats.read_fvt(p)


def test_fvt_corrupted_payload_raises_checksum(tmp_path):
    arr = np.zeros((4, 4, 3), dtype=np.float32)
    p = tmp_path / "c.fvt"
    formats.write_fvt(p, arr)
    blob = bytearray(p.read_bytes())
    blob[-8] ^= 0xFF  # inside the payload, before the CRC
    p.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        formats.read_fvt(p)


def test_fvt_corrupted_header_raises_format(tmp_path):
    arr = np.zeros((4, 4, 3), dtype=np.float32)
    p = tmp_path / "h.fvt"
    formats.write_fvt(p, arr)
    blob = bytearray(p.read_bytes())
    blob[14] ^= 0xFF  # inside the JSON header
    p.write_bytes(bytes(blob))
    with pytest.raises((FormatError, ChecksumError)):
        formats.read_fvt(p)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a": np.arange(6, dtype="<f4").reshape(2, 3),
               "b": np.arange(4, dtype="<f8")}
    p = tmp_path / "m.fvgc"
    formats.write_checkpoint(p, {"k": 1}, tensors, extra={"note": "x"})
    cfg, extra, back = formats.read_checkpoint(p)
    assert cfg == {"k": 1} and extra == {"note": "x"}
    assert back["a"].tobytes() == tensors["a"].tobytes()
    assert back["b"].dtype == np.float64


def test_checkpoint_save_load_save_byte_identical(tmp_path):
    tensors = {"w": np.random.default_rng(1).random((5, 5)).astype("<f4")}
    p1, p2 = tmp_path / "1.fvgc", tmp_path / "2.fvgc"
    formats.write_checkpoint(p1, {"d": 2}, tensors)
    cfg, extra, back = formats.read_checkpoint(p1)
    formats.write_checkpoint(p2, cfg, back, extra=extra)
    assert p1.read_bytes() == p2.read_bytes()


def test_ppm_roundtrip_quantized(tmp_path):
    frame = np.random.default_rng(2).random((32, 32, 3)).astype(np.float32)
    p = tmp_path / "f.ppm"
    formats.write_ppm(p, frame)
    back = formats.read_ppm(p)
    assert np.abs(back - frame).max() <= 0.5 / 255 + 1e-6


def test_ppm_exact_on_8bit_values(tmp_path):
    frame = (np.arange(32 * 32 * 3).reshape(32, 32, 3) % 256 / 255.0).astype(np.float32)
    formats.write_ppm(tmp_path / "g.ppm", frame)
    back = formats.read_ppm(tmp_path / "g.ppm")
    assert np.allclose(back, frame, atol=1e-7)


def test_csv_trailing_run_id(tmp_path):
    p = tmp_path / "s.csv"
    formats.write_csv(p, ["a", "b"], [[1, None], [2.5, "x"]], run_id="abc123")
    lines = p.read_text().splitlines()
    assert lines[0] == "a,b"
    assert lines[1] == "1,"
    assert lines[-1] == "# run_id=abc123"
