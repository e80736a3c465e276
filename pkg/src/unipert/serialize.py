"""Binary "UNIP" container for model checkpoints and perturbation artifacts.

Layout (all integers little-endian u32)::

    b"UNIP" | version | count | count x (rank | dims... | float32 data)

Perturbation artifacts hold one tensor followed by the ball metadata:
``p`` as u8 (0 means l-infinity, 2 means l2) and ``eps`` as a float64.
"""

import struct

import numpy as np

MAGIC = b"UNIP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensors(arrays):
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for a in arrays:
        a = np.asarray(a)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(out)


def _unpack_tensors(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    pos = 12
    arrays = []
    try:
        for _ in range(count):
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise CheckpointError("truncated tensor data")
            arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32))
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated file: {exc}") from None
    return arrays, pos


def save_params(path, params):
    with open(path, "wb") as f:
        f.write(_pack_tensors(params))


def load_params(path):
    with open(path, "rb") as f:
        buf = f.read()
    arrays, pos = _unpack_tensors(buf)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after tensors")
    return arrays


def save_model(path, model):
    save_params(path, model.params)


def load_model_into(path, model):
    """Replace ``model``'s parameters with those stored at ``path`` (shapes must match)."""
    arrays = load_params(path)
    if [a.shape for a in arrays] != [p.shape for p in model.params]:
        raise CheckpointError(
            f"checkpoint shapes {[a.shape for a in arrays]} do not match model "
            f"{[p.shape for p in model.params]}"
        )
    model.params = [a.astype(model.dtype) for a in arrays]
    return model


def save_perturbation(path, delta, p, eps):
    code = 0 if p in ("inf", np.inf) else 2
    with open(path, "wb") as f:
        f.write(_pack_tensors([delta]))
        f.write(struct.pack("<Bd", code, float(eps)))


def load_perturbation(path):
    """Returns (delta, p, eps) with p in {"inf", 2}."""
    with open(path, "rb") as f:
        buf = f.read()
    arrays, pos = _unpack_tensors(buf)
    if len(arrays) != 1 or len(buf) - pos != 9:
        raise CheckpointError("not a perturbation artifact")
    code, eps = struct.unpack_from("<Bd", buf, pos)
    if code not in (0, 2):
        raise CheckpointError(f"unknown norm code {code}")
    return arrays[0], ("inf" if code == 0 else 2), eps
