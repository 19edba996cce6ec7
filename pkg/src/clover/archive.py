"""Bit-exact tensor archive.

Layout: the first 8 bytes are a little-endian u64 with the byte length
of a UTF-8 JSON header that follows immediately. The header maps each
tensor name to ``{"dtype": "f64", "shape": [...], "offset": o,
"length": l}`` and carries a ``"meta"`` object that includes the format
version ``"clover-v1"``. After the header the file is zero-padded to a
64-byte boundary (the payload base); offsets are relative to that base
and every buffer starts 64-byte aligned. Payloads are raw little-endian
IEEE-754 binary64 in row-major order.

Writes are atomic (temp file + rename) and byte-deterministic: names are
laid out in lexicographic order and the JSON is serialized with sorted
keys, so identical content yields identical files.
"""

import json
import os
import struct
import tempfile

import numpy as np

from .attention import AttentionWeights, CloverFactors
from .exceptions import (
    ArchiveFormatError,
    ArchiveNonFiniteError,
    ArchiveOverlapError,
    ArchiveTruncatedError,
    ArchiveVersionError,
)

__all__ = [
    "FORMAT_VERSION",
    "write_archive",
    "read_archive",
    "save_weights",
    "load_weights",
    "save_factors",
    "load_factors",
    "save_train_state",
    "load_train_state",
]

FORMAT_VERSION = "clover-v1"
_ALIGN = 64


def _align(n):
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def write_archive(path, tensors, meta=None):
    """Write named float64 tensors plus a meta object; deterministic bytes.

    ``tensors`` is a mapping or an iterable of (name, array) pairs; names
    must be unique, non-empty, and not the reserved ``"meta"``.
    """
    if isinstance(tensors, dict):
        items = list(tensors.items())
    else:
        items = list(tensors)
        seen = set()
        for name, _ in items:
            if name in seen:
                raise ArchiveFormatError(f"duplicate tensor name {name!r}")
            seen.add(name)
    arrays = {}
    for name, value in items:
        if not isinstance(name, str) or not name:
            raise ArchiveFormatError(f"tensor names must be non-empty strings, got {name!r}")
        if name == "meta":
            raise ArchiveFormatError('"meta" is reserved for the header meta object')
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.size == 0:
            raise ArchiveFormatError(f"tensor {name!r} has a zero extent (shape {arr.shape})")
        if not np.isfinite(arr).all():
            raise ArchiveNonFiniteError(f"tensor {name!r} contains non-finite values")
        arrays[name] = arr

    header = {}
    offset = 0
    payload_end = 0
    for name in sorted(arrays):
        arr = arrays[name]
        length = 8 * arr.size
        header[name] = {
            "dtype": "f64",
            "shape": [int(s) for s in arr.shape],
            "offset": offset,
            "length": length,
        }
        payload_end = offset + length
        offset = _align(payload_end)
    header["meta"] = dict(meta or {})
    header["meta"].setdefault("version", FORMAT_VERSION)

    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload_base = _align(8 + len(blob))
    total = payload_base + payload_end

    buf = bytearray(total)
    buf[0:8] = struct.pack("<Q", len(blob))
    buf[8 : 8 + len(blob)] = blob
    for name, entry in header.items():
        if name == "meta":
            continue
        start = payload_base + entry["offset"]
        buf[start : start + entry["length"]] = arrays[name].astype("<f8").tobytes()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".clover-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(buf))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_archive(path):
    """Read an archive, validating every structural invariant first.

    Returns (tensors, meta). Raises distinct error kinds for version
    mismatch, truncated payloads, overlapping regions, malformed headers,
    and non-finite values.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ArchiveTruncatedError(f"{path}: file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", raw[0:8])
    if 8 + header_len > len(raw):
        raise ArchiveTruncatedError(f"{path}: declared header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveFormatError(f"{path}: malformed JSON header: {exc}") from exc
    if not isinstance(header, dict) or "meta" not in header or not isinstance(header["meta"], dict):
        raise ArchiveFormatError(f"{path}: header must be an object with a meta object")
    meta = header["meta"]
    version = meta.get("version")
    if version != FORMAT_VERSION:
        raise ArchiveVersionError(f"{path}: unsupported format version {version!r} (want {FORMAT_VERSION!r})")

    payload_base = _align(8 + header_len)
    entries = []
    for name, entry in header.items():
        if name == "meta":
            continue
        if not isinstance(entry, dict):
            raise ArchiveFormatError(f"{path}: entry {name!r} is not an object")
        if entry.get("dtype") != "f64":
            raise ArchiveFormatError(f"{path}: entry {name!r} has unsupported dtype {entry.get('dtype')!r}")
        shape = entry.get("shape")
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(s, int) and s > 0 for s in shape)
        ):
            raise ArchiveFormatError(f"{path}: entry {name!r} has invalid shape {shape!r}")
        offset, length = entry.get("offset"), entry.get("length")
        if not isinstance(offset, int) or offset < 0 or offset % _ALIGN != 0:
            raise ArchiveFormatError(f"{path}: entry {name!r} has invalid offset {offset!r}")
        size = int(np.prod(shape))
        if length != 8 * size:
            raise ArchiveFormatError(
                f"{path}: entry {name!r} declares length {length}, expected {8 * size} for shape {shape}"
            )
        if payload_base + offset + length > len(raw):
            raise ArchiveTruncatedError(
                f"{path}: entry {name!r} extends to byte {payload_base + offset + length}, file has {len(raw)}"
            )
        entries.append((offset, length, name, shape))

    entries.sort()
    for (off_a, len_a, name_a, _), (off_b, _, name_b, _) in zip(entries, entries[1:]):
        if off_a + len_a > off_b:
            raise ArchiveOverlapError(f"{path}: tensors {name_a!r} and {name_b!r} overlap")

    tensors = {}
    for offset, length, name, shape in entries:
        start = payload_base + offset
        arr = np.frombuffer(raw, dtype="<f8", count=length // 8, offset=start).reshape(shape)
        arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise ArchiveNonFiniteError(f"{path}: tensor {name!r} contains non-finite values")
        tensors[name] = arr
    return tensors, meta


def _base_meta(kind, dims, mode, mask_kind, rope, rank_qk, rank_vo):
    D, h, d = dims
    return {
        "version": FORMAT_VERSION,
        "kind": kind,
        "dims": {"D": int(D), "h": int(h), "d": int(d)},
        "mode": mode,
        "mask": mask_kind,
        "rope": {"enabled": bool(rope.enabled), "base": float(rope.base)} if rope else {"enabled": False, "base": 10000.0},
        "rank_qk": [int(r) for r in rank_qk],
        "rank_vo": [int(r) for r in rank_vo],
    }


def save_weights(path, w, mask_kind="none", rope=None, extra_meta=None):
    D, h, d = w.dims
    meta = _base_meta("weights", w.dims, "plain", mask_kind, rope, [d] * h, [d] * h)
    meta.update(extra_meta or {})
    write_archive(path, w.tensors(), meta)


def load_weights(path):
    tensors, meta = read_archive(path)
    if meta.get("kind") != "weights":
        raise ArchiveFormatError(f"{path}: expected a weights archive, got kind {meta.get('kind')!r}")
    w = AttentionWeights(
        w_q=tensors["w_q"],
        w_k=tensors["w_k"],
        w_v=tensors["w_v"],
        w_o=tensors["w_o"],
        b_q=tensors.get("b_q"),
        b_k=tensors.get("b_k"),
        b_v=tensors.get("b_v"),
        b_o=tensors.get("b_o"),
    )
    return w, meta


def save_factors(path, f, mask_kind="none", rope=None, extra_meta=None):
    meta = _base_meta(
        "factors",
        f.dims,
        f.mode,
        mask_kind,
        rope,
        f.rank_qk if f.rank_qk is not None else [f.dims[2]] * f.dims[1],
        f.rank_vo,
    )
    meta.update(extra_meta or {})
    tensors = {"u_vo": f.u_vo, "s_vo": f.s_vo, "v_vo": f.v_vo}
    if f.mode == "svd":
        tensors.update({"u_qk": f.u_qk, "s_qk": f.s_qk, "v_qk": f.v_qk})
    else:
        tensors.update({"q_q": f.q_q, "r_q": f.r_q, "q_k": f.q_k, "r_k": f.r_k})
    if f.folded_b_o is not None:
        tensors["folded_b_o"] = f.folded_b_o
    for name in ("trainable_s_qk", "trainable_s_vo"):
        val = getattr(f, name)
        if val is not None:
            tensors[name] = val
    write_archive(path, tensors, meta)


def load_factors(path):
    tensors, meta = read_archive(path)
    if meta.get("kind") != "factors":
        raise ArchiveFormatError(f"{path}: expected a factors archive, got kind {meta.get('kind')!r}")
    dims = (meta["dims"]["D"], meta["dims"]["h"], meta["dims"]["d"])
    mode = meta.get("mode")
    common = {
        "mode": mode,
        "dims": dims,
        "u_vo": tensors["u_vo"],
        "s_vo": tensors["s_vo"],
        "v_vo": tensors["v_vo"],
        "rank_vo": np.asarray(meta["rank_vo"], dtype=np.int64),
        "folded_b_o": tensors.get("folded_b_o"),
        "trainable_s_qk": tensors.get("trainable_s_qk"),
        "trainable_s_vo": tensors.get("trainable_s_vo"),
    }
    if mode == "svd":
        f = CloverFactors(
            u_qk=tensors["u_qk"],
            s_qk=tensors["s_qk"],
            v_qk=tensors["v_qk"],
            rank_qk=np.asarray(meta["rank_qk"], dtype=np.int64),
            **common,
        )
    elif mode == "qr":
        f = CloverFactors(
            q_q=tensors["q_q"],
            r_q=tensors["r_q"],
            q_k=tensors["q_k"],
            r_k=tensors["r_k"],
            **common,
        )
    else:
        raise ArchiveFormatError(f"{path}: unknown factor mode {mode!r}")
    return f, meta


def save_train_state(path, state, mask_kind="none", rope=None, task=None):
    """Persist a fine-tuning run: factors, live parameters, moments, history."""
    f = state.factors
    meta = _base_meta(
        "train_state",
        f.dims,
        f.mode,
        mask_kind,
        rope,
        f.rank_qk if f.rank_qk is not None else [f.dims[2]] * f.dims[1],
        f.rank_vo,
    )
    meta.update(
        {
            "optimizer": state.optimizer,
            "lr": state.lr,
            "step": state.step,
            "trained": list(state.trained_names),
            "frozen_checksum": state.frozen_checksum,
        }
    )
    if task is not None:
        meta["task"] = {
            "kind": task.kind,
            "seed": task.seed,
            "dims": [task.batch, task.seq, task.width],
            "teacher_scale": task.teacher_scale,
            "teacher_jitter": task.teacher_jitter,
            "vocab": task.vocab,
            "n_batches": task.n_batches,
        }
    tensors = {"u_vo": f.u_vo, "s_vo": f.s_vo, "v_vo": f.v_vo}
    if f.mode == "svd":
        tensors.update({"u_qk": f.u_qk, "s_qk": f.s_qk, "v_qk": f.v_qk})
    else:
        tensors.update({"q_q": f.q_q, "r_q": f.r_q, "q_k": f.q_k, "r_k": f.r_k})
    if f.folded_b_o is not None:
        tensors["folded_b_o"] = f.folded_b_o
    for name in state.trained_names:
        tensors[f"param.{name}"] = state.trainable[name]
        tensors[f"adam_m.{name}"] = state.moments_m[name]
        tensors[f"adam_v.{name}"] = state.moments_v[name]
    if state.loss_history:
        tensors["loss_history"] = np.asarray(state.loss_history, dtype=np.float64)
        tensors["grad_norms"] = np.asarray(state.grad_norms, dtype=np.float64)
    write_archive(path, tensors, meta)


def load_train_state(path):
    from .finetune import TrainState

    tensors, meta = read_archive(path)
    if meta.get("kind") != "train_state":
        raise ArchiveFormatError(f"{path}: expected a train-state archive, got kind {meta.get('kind')!r}")
    dims = (meta["dims"]["D"], meta["dims"]["h"], meta["dims"]["d"])
    mode = meta["mode"]
    common = {
        "mode": mode,
        "dims": dims,
        "u_vo": tensors["u_vo"],
        "s_vo": tensors["s_vo"],
        "v_vo": tensors["v_vo"],
        "rank_vo": np.asarray(meta["rank_vo"], dtype=np.int64),
        "folded_b_o": tensors.get("folded_b_o"),
    }
    if mode == "svd":
        f = CloverFactors(
            u_qk=tensors["u_qk"],
            s_qk=tensors["s_qk"],
            v_qk=tensors["v_qk"],
            rank_qk=np.asarray(meta["rank_qk"], dtype=np.int64),
            **common,
        )
    else:
        f = CloverFactors(
            q_q=tensors["q_q"],
            r_q=tensors["r_q"],
            q_k=tensors["q_k"],
            r_k=tensors["r_k"],
            **common,
        )
    names = tuple(meta["trained"])
    state = TrainState(
        factors=f,
        trainable={n: tensors[f"param.{n}"] for n in names},
        moments_m={n: tensors[f"adam_m.{n}"] for n in names},
        moments_v={n: tensors[f"adam_v.{n}"] for n in names},
        optimizer=meta["optimizer"],
        lr=float(meta["lr"]),
        step=int(meta["step"]),
        loss_history=list(tensors.get("loss_history", np.zeros(0))),
        grad_norms=list(tensors.get("grad_norms", np.zeros(0))),
        frozen_checksum=meta["frozen_checksum"],
        trained_names=names,
    )
    return state, meta
