import hashlib
import json
import struct

import numpy as np
import pytest

from clover.archive import (
    FORMAT_VERSION,
    load_factors,
    load_train_state,
    load_weights,
    read_archive,
    save_factors,
    save_train_state,
    save_weights,
    write_archive,
)
from clover.exceptions import (
    ArchiveFormatError,
    ArchiveNonFiniteError,
    ArchiveOverlapError,
    ArchiveTruncatedError,
    ArchiveVersionError,
)
from clover.finetune import make_toy_task, train_toy
from clover.rng import make_rng
from clover.synth import random_weights
from clover.transform import decompose_factors

ALIGN = 64


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def rewrite_header(path, mutate):
    """Reload an archive's header JSON, mutate it, and write the file back."""
    raw = bytearray(open(path, "rb").read())
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    payload = raw[_align(8 + hlen) :]
    mutate(header)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(struct.pack("<Q", len(blob)) + blob)
    out += b"\x00" * (_align(len(out)) - len(out))
    out += payload
    open(path, "wb").write(bytes(out))


def test_round_trip_bit_identical(tmp_path):
    rng = make_rng(150)
    tensors = {
        "w": rng.normal(size=(3, 4, 2)),
        "bias": rng.normal(size=5),
        "scalar_ish": rng.normal(size=(1,)),
    }
    path = tmp_path / "a.clover"
    write_archive(path, tensors, {"kind": "misc", "note": 7})
    loaded, meta = read_archive(path)
    assert meta["version"] == FORMAT_VERSION and meta["note"] == 7
    for name, arr in tensors.items():
        assert np.array_equal(loaded[name], arr)
        assert loaded[name].dtype == np.float64


def test_single_tensor_file_size_arithmetic(tmp_path):
    path = tmp_path / "tiny.clover"
    write_archive(path, {"m": np.ones((2, 2))}, {"kind": "misc"})
    raw = open(path, "rb").read()
    (hlen,) = struct.unpack("<Q", raw[:8])
    # length prefix + header + padding to the aligned payload base + 32 bytes
    assert len(raw) == _align(8 + hlen) + 32


def test_identical_content_identical_bytes(tmp_path):
    rng = make_rng(151)
    tensors = {"a": rng.normal(size=(4, 4)), "b": rng.normal(size=(2, 8))}
    p1, p2 = tmp_path / "one.clover", tmp_path / "two.clover"
    write_archive(p1, tensors, {"kind": "misc"})
    write_archive(p2, dict(reversed(tensors.items())), {"kind": "misc"})
    h1 = hashlib.sha256(open(p1, "rb").read()).hexdigest()
    h2 = hashlib.sha256(open(p2, "rb").read()).hexdigest()
    assert h1 == h2


def test_payload_alignment(tmp_path):
    path = tmp_path / "aligned.clover"
    write_archive(path, {"x": np.ones(3), "y": np.ones((5, 5))}, {})
    raw = open(path, "rb").read()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode())
    for name in ("x", "y"):
        assert header[name]["offset"] % ALIGN == 0


def test_write_rejects_bad_names(tmp_path):
    path = tmp_path / "bad.clover"
    with pytest.raises(ArchiveFormatError):
        write_archive(path, {"": np.ones(2)}, {})
    with pytest.raises(ArchiveFormatError):
        write_archive(path, {"meta": np.ones(2)}, {})
    with pytest.raises(ArchiveFormatError):
        write_archive(path, [("dup", np.ones(2)), ("dup", np.ones(2))], {})


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(ArchiveNonFiniteError):
        write_archive(tmp_path / "nan.clover", {"x": np.array([1.0, np.nan])}, {})


def test_version_mismatch(tmp_path):
    path = tmp_path / "v.clover"
    write_archive(path, {"x": np.ones(2)}, {})
    rewrite_header(path, lambda h: h["meta"].update(version="clover-v0"))
    with pytest.raises(ArchiveVersionError):
        read_archive(path)


def test_offset_past_eof_is_truncation(tmp_path):
    path = tmp_path / "t.clover"
    write_archive(path, {"x": np.ones(4)}, {})
    rewrite_header(path, lambda h: h["x"].update(offset=64 * 1024))
    with pytest.raises(ArchiveTruncatedError):
        read_archive(path)


def test_physically_truncated_payload(tmp_path):
    path = tmp_path / "t2.clover"
    write_archive(path, {"x": np.ones(100)}, {})
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-80])
    with pytest.raises(ArchiveTruncatedError):
        read_archive(path)


def test_overlapping_offsets(tmp_path):
    path = tmp_path / "o.clover"
    write_archive(path, {"x": np.ones(16), "y": np.ones(16)}, {})
    rewrite_header(path, lambda h: h["y"].update(offset=h["x"]["offset"]))
    with pytest.raises(ArchiveOverlapError):
        read_archive(path)


def test_non_finite_payload_detected(tmp_path):
    path = tmp_path / "n.clover"
    write_archive(path, {"x": np.ones(4)}, {})
    raw = bytearray(open(path, "rb").read())
    raw[-8:] = struct.pack("<d", float("inf"))
    open(path, "wb").write(bytes(raw))
    with pytest.raises(ArchiveNonFiniteError):
        read_archive(path)


def test_malformed_header_json(tmp_path):
    path = tmp_path / "j.clover"
    write_archive(path, {"x": np.ones(2)}, {})
    raw = bytearray(open(path, "rb").read())
    raw[9] = ord("!")
    open(path, "wb").write(bytes(raw))
    with pytest.raises(ArchiveFormatError):
        read_archive(path)


def test_bad_entry_fields(tmp_path):
    for mutation, exc in [
        (lambda h: h["x"].update(dtype="f32"), ArchiveFormatError),
        (lambda h: h["x"].update(shape=[0, 2]), ArchiveFormatError),
        (lambda h: h["x"].update(shape=[3]), ArchiveFormatError),  # length mismatch
        (lambda h: h["x"].update(offset=13), ArchiveFormatError),  # misaligned
        (lambda h: h.pop("meta"), ArchiveFormatError),
    ]:
        import tempfile, os

        fd, path = tempfile.mkstemp(suffix=".clover")
        os.close(fd)
        write_archive(path, {"x": np.ones(2)}, {})
        rewrite_header(path, mutation)
        with pytest.raises(exc):
            read_archive(path)
        os.unlink(path)


def test_file_shorter_than_prefix(tmp_path):
    path = tmp_path / "s.clover"
    open(path, "wb").write(b"\x01\x02")
    with pytest.raises(ArchiveTruncatedError):
        read_archive(path)


def test_weights_round_trip(tmp_path):
    w = random_weights(8, 2, 4, seed=152, bias=True)
    path = tmp_path / "w.clover"
    save_weights(path, w)
    loaded, meta = load_weights(path)
    assert meta["dims"] == {"D": 8, "h": 2, "d": 4}
    for name in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o"):
        assert np.array_equal(getattr(w, name), getattr(loaded, name))


def test_factors_round_trip_both_modes(tmp_path):
    w = random_weights(8, 2, 4, seed=153, bias=True)
    for mode, name in (("svd", "f1.clover"), ("qr", "f2.clover")):
        source = w if mode == "svd" else random_weights(8, 2, 4, seed=154)
        f = decompose_factors(source, mode=mode)
        path = tmp_path / name
        save_factors(path, f)
        loaded, meta = load_factors(path)
        assert meta["mode"] == mode
        assert loaded.dims == f.dims
        np.testing.assert_array_equal(loaded.u_vo, f.u_vo)
        if mode == "svd":
            np.testing.assert_array_equal(loaded.u_qk, f.u_qk)
            np.testing.assert_array_equal(loaded.rank_qk, f.rank_qk)
        else:
            np.testing.assert_array_equal(loaded.r_q, f.r_q)


def test_wrong_kind_rejected(tmp_path):
    w = random_weights(8, 2, 4, seed=155)
    path = tmp_path / "w.clover"
    save_weights(path, w)
    with pytest.raises(ArchiveFormatError):
        load_factors(path)


def test_train_state_round_trip(tmp_path):
    w = random_weights(12, 2, 4, seed=156)
    f = decompose_factors(w)
    task = make_toy_task("sequence-regression", 9, (2, 5, 12))
    state = train_toy(f, task, steps=8, lr=1e-3)
    path = tmp_path / "state.clover"
    save_train_state(path, state, task=task)
    loaded, meta = load_train_state(path)
    assert loaded.step == state.step
    assert loaded.optimizer == state.optimizer
    assert loaded.trained_names == state.trained_names
    assert meta["task"]["kind"] == "sequence-regression"
    for name in state.trained_names:
        np.testing.assert_array_equal(loaded.trainable[name], state.trainable[name])
        np.testing.assert_array_equal(loaded.moments_m[name], state.moments_m[name])
    np.testing.assert_allclose(loaded.loss_history, state.loss_history, rtol=0)
    assert loaded.frozen_checksum == state.frozen_checksum
    # the reloaded factors still compute the same function
    from clover.attention import mha_forward_factored
    from clover.synth import random_inputs

    x = random_inputs(2, 5, 12, seed=157)
    a = mha_forward_factored(x, state.current_factors())
    b = mha_forward_factored(x, loaded.current_factors())
    assert np.array_equal(a, b)


def test_many_round_trips_stay_exact(tmp_path):
    path = tmp_path / "loop.clover"
    for seed in range(30):
        rng = make_rng(158, seed)
        tensors = {
            f"t{j}": rng.normal(size=tuple(rng.integers(1, 6, size=int(rng.integers(1, 4)))))
            for j in range(int(rng.integers(1, 5)))
        }
        write_archive(path, tensors, {"kind": "misc", "seed": seed})
        loaded, _ = read_archive(path)
        for name, arr in tensors.items():
            assert np.array_equal(loaded[name], arr)
