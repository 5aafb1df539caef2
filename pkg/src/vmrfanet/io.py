"""Binary file formats: portable tensor files, checkpoints, and netpbm images.

Tensor file layout (all integers little-endian u32)::

    b"VTNS" | version | rank | dim_0 ... dim_{rank-1} | float32 LE data, row-major

Checkpoint layout::

    b"VMRF" | version | count | count x (name_len | utf-8 name | tensor file)
"""

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, IngestionError

TENSOR_MAGIC = b"VTNS"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"VMRF"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


def encode_tensor(array):
    arr = np.asarray(array, dtype="<f4")  # ascontiguousarray would promote rank 0 to rank 1
    header = TENSOR_MAGIC + _U32.pack(TENSOR_VERSION) + _U32.pack(arr.ndim)
    header += b"".join(_U32.pack(d) for d in arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf, offset=0):
    """Parse one tensor from ``buf`` at ``offset``; returns ``(array, new_offset)``."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", offset)
    version, pos = _read_u32(buf, offset + 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset + 4)
    rank, pos = _read_u32(buf, pos)
    if rank > 32:
        raise FormatError(f"implausible tensor rank {rank}", pos - 4)
    dims = []
    for _ in range(rank):
        d, pos = _read_u32(buf, pos)
        dims.append(d)
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError(f"truncated tensor data: need {4 * count} bytes", pos)
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
    return arr, end


def _read_u32(buf, pos):
    if pos + 4 > len(buf):
        raise FormatError("truncated header", pos)
    return _U32.unpack_from(buf, pos)[0], pos + 4


def atomic_write(path, data):
    """Write bytes via a temporary file and rename, so readers never see a partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, array):
    atomic_write(path, encode_tensor(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor", end)
    return arr


def encode_checkpoint(entries):
    """``entries`` is an ordered mapping of unique name -> array."""
    out = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        out += [_U32.pack(len(raw)), raw, encode_tensor(arr)]
    return b"".join(out)


def decode_checkpoint(buf):
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, pos = _read_u32(buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    count, pos = _read_u32(buf, pos)
    entries = {}
    for _ in range(count):
        n, pos = _read_u32(buf, pos)
        if pos + n > len(buf):
            raise FormatError("truncated parameter name", pos)
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", pos) from None
        if name in entries:
            raise FormatError(f"duplicate parameter name {name!r}", pos)
        entries[name], pos = decode_tensor(buf, pos + n)
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", pos)
    return entries


def save_checkpoint(path, entries):
    atomic_write(path, encode_checkpoint(entries))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------- netpbm

def _ppm_tokens(buf, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise IngestionError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # single whitespace byte after maxval


def decode_ppm(buf):
    """Decode an 8-bit binary PPM (P6) into a 3xHxW float32 array in [0, 1]."""
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise IngestionError(f"not a binary PPM (P6) image: magic {tokens[0][:2]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IngestionError("malformed PPM header") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise IngestionError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    need = w * h * 3
    if len(buf) - pos < need:
        raise IngestionError("truncated PPM pixel data")
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return (px.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval))


def encode_ppm(image):
    """Encode a 3xHxW array in [0, 1] as P6 bytes."""
    img = np.asarray(image, dtype=np.float64)
    px = np.clip(np.round(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()


def encode_pgm(gray):
    """Encode an HxW uint8 array as P5 bytes."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes()


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path, image):
    atomic_write(path, encode_ppm(image))
