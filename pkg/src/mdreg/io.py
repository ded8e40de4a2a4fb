"""Volume files (raw payload + JSON sidecar) and parameter checkpoints.

A volume ``name`` is stored as ``name.json`` and ``name.raw``. The sidecar
carries the magic ``"MDRN"``, ``format_version`` 1, the kind (``scalar``,
``vector`` or ``labels``), spatial dims, channel count, payload dtype (``f32``
or ``u16``), byte order (always ``little``), the payload file name and an
optional provenance record. Payloads are C-ordered with the channel axis
first, so axis 0 of the grid is the slowest-varying spatial axis.

A checkpoint is a single binary file::

    bytes 0-7    b"MDRNCKPT"
    bytes 8-11   format version, uint32 LE (1)
    bytes 12-15  manifest length M, uint32 LE
    bytes 16..   manifest, M bytes of UTF-8 JSON
    then         arrays as float32 LE, back to back, in manifest order

The manifest holds the config digest, mode, dims, seed, the full config and,
for each array, its name, shape and byte offset relative to the payload start.
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = "MDRN"
FORMAT_VERSION = 1
CKPT_MAGIC = b"MDRNCKPT"
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}
_KINDS = ("scalar", "vector", "labels")


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where the problem was found."""

    def __init__(self, msg, path=None, offset=0):
        self.path = None if path is None else str(path)
        self.offset = int(offset)
        where = f"{self.path}: " if path is not None else ""
        super().__init__(f"{where}{msg} (byte offset {self.offset})")


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class LengthMismatch(FormatError):
    def __init__(self, msg, path=None, offset=0, expected=None, actual=None):
        self.expected, self.actual = expected, actual
        super().__init__(msg, path, offset)


def atomic_write(path, data):
    """Write bytes via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _paths(path):
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _key_offset(text, key):
    i = text.find(f'"{key}"')
    return len(text[:max(i, 0)].encode())


def write_volume(arr, path, kind=None, provenance=None):
    """Store ``arr`` as ``f32`` (scalar/vector) or ``u16`` (labels); returns the sidecar path.

    ``kind`` defaults to ``labels`` for integer arrays and ``scalar`` otherwise;
    vector fields must be written with ``kind="vector"``.
    """
    arr = np.asarray(arr)
    if kind is None:
        kind = "labels" if np.issubdtype(arr.dtype, np.integer) else "scalar"
    if kind not in _KINDS:
        raise ValueError(f"unknown volume kind {kind!r}")
    if kind == "vector":
        if arr.ndim < 2 or arr.shape[0] != arr.ndim - 1:
            raise ValueError(f"vector field must be (d, *dims), got shape {arr.shape}")
        dims, channels = arr.shape[1:], arr.shape[0]
    else:
        dims, channels = arr.shape, 1
    if kind == "labels":
        if arr.size and (arr.min() < 0 or arr.max() > 65535):
            raise ValueError("labels must fit in 16 unsigned bits")
        dtype = "u16"
    else:
        if not np.all(np.isfinite(arr)):
            raise ValueError("refusing to write non-finite values")
        dtype = "f32"
    header_path, raw_path = _paths(path)
    header = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "dims": [int(n) for n in dims],
        "channels": int(channels),
        "dtype": dtype,
        "byte_order": "little",
        "data_file": raw_path.name,
    }
    if provenance:
        header["provenance"] = provenance
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    atomic_write(raw_path, payload)
    atomic_write(header_path, (json.dumps(header, indent=1) + "\n").encode())
    return header_path


def read_header(path):
    header_path, _ = _paths(path)
    text = header_path.read_text(encoding="utf-8")
    try:
        header = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"sidecar is not JSON: {e.msg}", header_path, e.pos) from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        got = header.get("magic") if isinstance(header, dict) else None
        raise BadMagic(f"expected magic {MAGIC!r}, found {got!r}", header_path, _key_offset(text, "magic"))
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"format_version {header.get('format_version')!r}, reader supports {FORMAT_VERSION}",
                              header_path, _key_offset(text, "format_version"))
    for key, ok in (("kind", header.get("kind") in _KINDS),
                    ("dtype", header.get("dtype") in _DTYPES),
                    ("byte_order", header.get("byte_order") == "little"),
                    ("dims", isinstance(header.get("dims"), list) and all(
                        isinstance(n, int) and n > 0 for n in header.get("dims", [None]))),
                    ("channels", isinstance(header.get("channels"), int) and header.get("channels", 0) > 0),
                    ("data_file", isinstance(header.get("data_file"), str))):
        if not ok:
            raise FormatError(f"invalid {key} {header.get(key)!r}", header_path, _key_offset(text, key))
    if header["kind"] == "vector" and header["channels"] != len(header["dims"]):
        raise FormatError(f"vector field with {header['channels']} channels on {len(header['dims'])}-D dims",
                          header_path, _key_offset(text, "channels"))
    if header["kind"] != "vector" and header["channels"] != 1:
        raise FormatError(f"{header['kind']} volume with {header['channels']} channels",
                          header_path, _key_offset(text, "channels"))
    return header


def read_volume(path, with_header=False):
    """Load a volume in its stored dtype (float32 or uint16)."""
    header_path, _ = _paths(path)
    header = read_header(header_path)
    raw_path = header_path.parent / header["data_file"]
    dtype = _DTYPES[header["dtype"]]
    dims = tuple(header["dims"])
    shape = (header["channels"],) + dims if header["kind"] == "vector" else dims
    expected = int(np.prod(shape)) * dtype.itemsize
    data = raw_path.read_bytes()
    if len(data) != expected:
        raise LengthMismatch(f"payload has {len(data)} bytes, header implies {expected}",
                             raw_path, min(len(data), expected), expected, len(data))
    arr = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        first = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise FormatError("payload holds non-finite values", raw_path, first * dtype.itemsize)
    return (arr, header) if with_header else arr


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, cfg, path):
    """Write ``params`` (rounded to float32) with ``cfg`` to a single checkpoint file."""
    arrays = params.named_arrays()
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        b = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    manifest = {
        "config_digest": cfg.digest(),
        "mode": params.mode,
        "dims": list(params.dims),
        "seed": params.seed,
        "config": cfg.to_dict(),
        "arrays": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    head = CKPT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(mbytes))
    atomic_write(path, head + mbytes + b"".join(chunks))


def load_checkpoint(path):
    """Returns ``(ModelParams, RegistrationConfig)``; weights come back as float32 values in float64."""
    from .engine import RegistrationConfig
    from .regnet import init_params

    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise BadMagic(f"expected {CKPT_MAGIC!r}, found {data[:8]!r}", path, 0)
    if len(data) < 16:
        raise LengthMismatch(f"header needs 16 bytes, file has {len(data)}", path, len(data), 16, len(data))
    version, mlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, reader supports {FORMAT_VERSION}", path, 8)
    if len(data) < 16 + mlen:
        raise LengthMismatch(f"manifest needs {mlen} bytes, file has {len(data) - 16}",
                             path, len(data), 16 + mlen, len(data))
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest: {e}", path, 16) from None
    cfg = RegistrationConfig.from_dict(manifest["config"])
    if cfg.digest() != manifest["config_digest"]:
        raise FormatError("config digest does not match the stored config", path, 16)
    base = 16 + mlen
    expected = base + sum(e["nbytes"] for e in manifest["arrays"])
    if len(data) != expected:
        raise LengthMismatch(f"file has {len(data)} bytes, manifest implies {expected}",
                             path, min(len(data), expected), expected, len(data))
    dims = tuple(manifest["dims"])
    params = init_params(cfg.spec(len(dims)), dims, manifest["seed"], manifest["mode"])
    targets = {}
    if params.mode == "direct":
        for l, p in enumerate(params.velocities, start=1):
            targets[f"v{l}"] = p
    else:
        for l, net in enumerate(params.subnets, start=1):
            for name, (w, b) in net.items():
                targets[f"s{l}.{name}.w"] = w
                targets[f"s{l}.{name}.b"] = b
    if set(targets) != {e["name"] for e in manifest["arrays"]}:
        raise FormatError("checkpoint arrays do not match the configured architecture", path, 16)
    for e in manifest["arrays"]:
        p = targets[e["name"]]
        start = base + e["offset"]
        a = np.frombuffer(data[start:start + e["nbytes"]], dtype="<f4")
        if tuple(e["shape"]) != p.value.shape or a.size != p.value.size:
            raise FormatError(f"array {e['name']} has shape {e['shape']}, expected {list(p.value.shape)}",
                              path, start)
        p.value = a.reshape(p.value.shape).astype(np.float64)
    return params, cfg
