"""Binary tensor container (``.ftns``) and JSON layer-bundle manifests.

File layout, little-endian throughout::

    offset  size      field
    0       4         magic b"FTNS"
    4       1         version (1)
    5       1         dtype code (0=f32, 1=f64, 2=i8, 3=i32)
    6       1         ndim
    7       1         reserved (0)
    8       8*ndim    dims, u64 each
    ...               row-major payload

The header is therefore ``8 + 8 * ndim`` bytes long.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InvalidTensor,
    IoFailure,
    MissingFile,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedDtype,
)

MAGIC = b"FTNS"
VERSION = 1

DTYPE_CODES = {"f32": 0, "f64": 1, "i8": 2, "i32": 3}
_CODE_TO_NAME = {v: k for k, v in DTYPE_CODES.items()}
_NUMPY_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i8": np.dtype("i1"),
    "i32": np.dtype("<i4"),
}


@dataclass(frozen=True)
class TensorFile:
    """An n-dimensional array tagged with one of the four container dtypes."""

    dtype: str
    dims: tuple[int, ...]
    data: np.ndarray  # flat, row-major, little-endian

    def __post_init__(self):
        if self.dtype not in DTYPE_CODES:
            raise UnsupportedDtype(f"dtype {self.dtype!r} not in {sorted(DTYPE_CODES)}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 1 or len(dims) > 255:
            raise InvalidTensor(f"ndim must be in 1..255, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise InvalidTensor(f"every dim must be >= 1, got {dims}")
        data = np.ascontiguousarray(self.data, dtype=_NUMPY_DTYPES[self.dtype]).reshape(-1)
        if data.size != int(np.prod(dims)):
            raise InvalidTensor(f"payload has {data.size} elements, dims {dims} need {int(np.prod(dims))}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array, dtype: str | None = None) -> "TensorFile":
        array = np.asarray(array)
        if dtype is None:
            dtype = {"float32": "f32", "float64": "f64", "int8": "i8", "int32": "i32"}.get(array.dtype.name)
            if dtype is None:
                raise UnsupportedDtype(f"no container dtype for numpy {array.dtype}")
        return cls(dtype, array.shape if array.ndim else (1,), array.reshape(-1))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def to_bytes(self) -> bytes:
        header = struct.pack("<4sBBBB", MAGIC, VERSION, DTYPE_CODES[self.dtype], self.ndim, 0)
        header += struct.pack(f"<{self.ndim}Q", *self.dims)
        return header + self.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, TensorFile):
            return NotImplemented
        return self.dtype == other.dtype and self.dims == other.dims and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.dtype, self.dims, self.data.tobytes()))


def parse_tensor(buf: bytes) -> TensorFile:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise BadMagic("not an FTNS tensor file")
    version, code, ndim, _reserved = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise BadMagic(f"unsupported container version {version}")
    if code not in _CODE_TO_NAME:
        raise UnsupportedDtype(f"dtype code {code}")
    if ndim < 1:
        raise TruncatedPayload("ndim is 0")
    header_size = 8 + 8 * ndim
    if len(buf) < header_size:
        raise TruncatedPayload(f"header needs {header_size} bytes, file has {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 8)
    if any(d < 1 for d in dims):
        raise TruncatedPayload(f"zero extent in dims {dims}")
    dtype = _CODE_TO_NAME[code]
    itemsize = _NUMPY_DTYPES[dtype].itemsize
    expected = int(np.prod(dims, dtype=object)) * itemsize
    actual = len(buf) - header_size
    if actual != expected:
        raise TruncatedPayload(f"dims {dims} need {expected} payload bytes, found {actual}")
    data = np.frombuffer(buf, dtype=_NUMPY_DTYPES[dtype], offset=header_size).copy()
    return TensorFile(dtype, dims, data)


def read_tensor(path) -> TensorFile:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingFile(str(path)) from exc
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return parse_tensor(buf)


def write_tensor(t: TensorFile, path) -> None:
    if not isinstance(t, TensorFile):
        raise InvalidTensor(f"expected TensorFile, got {type(t).__name__}")
    payload = t.to_bytes()  # built fully before the file is opened
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def save_array(array, path, dtype: str | None = None) -> None:
    write_tensor(TensorFile.from_array(array, dtype), path)


def load_array(path) -> np.ndarray:
    return read_tensor(path).to_array()


@dataclass
class LayerBundle:
    """One layer's weights ``[d_row, d_col]`` and calibration inputs ``[d_col, N]``.

    Float inputs are widened to f64 on construction.
    """

    name: str
    weight: np.ndarray
    calib: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.calib = np.asarray(self.calib, dtype=np.float64)
        if self.weight.ndim != 2 or self.calib.ndim != 2:
            raise ShapeMismatch(
                f"{self.name}: weight and calib must be 2-D, got {self.weight.shape} and {self.calib.shape}"
            )
        if self.weight.shape[1] != self.calib.shape[0]:
            raise ShapeMismatch(
                f"{self.name}: weight d_col={self.weight.shape[1]} but calib has {self.calib.shape[0]} rows"
            )

    @property
    def d_row(self) -> int:
        return self.weight.shape[0]

    @property
    def d_col(self) -> int:
        return self.weight.shape[1]

    @property
    def n_samples(self) -> int:
        return self.calib.shape[1]


def load_bundle(manifest) -> list[LayerBundle]:
    manifest = Path(manifest)
    try:
        doc = json.loads(manifest.read_text())
    except FileNotFoundError as exc:
        raise MissingFile(str(manifest)) from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"{manifest}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise IoFailure(f"{manifest}: expected an object with a 'layers' list")

    base = manifest.parent
    bundles = []
    for entry in doc["layers"]:
        try:
            name, wpath, cpath = entry["name"], entry["weight"], entry["calib"]
        except (KeyError, TypeError) as exc:
            raise IoFailure(f"{manifest}: malformed layer entry {entry!r}") from exc
        weight = load_array(base / wpath)
        calib = load_array(base / cpath)
        meta = {k: v for k, v in entry.items() if k not in ("name", "weight", "calib")}
        meta.update(entry.get("metadata", {}) or {})
        meta.pop("metadata", None)
        bundles.append(LayerBundle(name, weight, calib, meta))
    return bundles


def write_bundle(bundles, manifest, dtype: str = "f64") -> None:
    """Persist layers as tensor files next to ``manifest`` and write the manifest."""
    manifest = Path(manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    layers = []
    for b in bundles:
        wname, cname = f"{b.name}.weight.ftns", f"{b.name}.calib.ftns"
        save_array(b.weight.astype(_NUMPY_DTYPES[dtype]), manifest.parent / wname, dtype)
        save_array(b.calib.astype(_NUMPY_DTYPES[dtype]), manifest.parent / cname, dtype)
        entry = {"name": b.name, "weight": wname, "calib": cname}
        if b.metadata:
            entry["metadata"] = b.metadata
        layers.append(entry)
    manifest.write_text(json.dumps({"layers": layers}, indent=2) + "\n")
