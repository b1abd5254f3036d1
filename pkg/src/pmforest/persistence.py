"""Index file format.

Layout (all integers little-endian)::

    magic      8 bytes  b"PMFOREST"
    version    u32
    count      u32      number of sections
    table      count x (name: 16 bytes NUL-padded, offset: u64, length: u64, crc32: u32)
    payloads   concatenated section bodies

Each section body is one value in a small tagged encoding (None, bool, int,
float, str, list, dict with str keys, numpy array with explicit little-endian
dtype; unsigned 64-bit ints get their own tag). Encoding is deterministic, so
equal models produce equal bytes.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .antisparse import AnnIndex
from .novelty import NoveltyModel
from .partition import PartitionTree
from .product_index import BlockPartition, PMForest, PMTree
from .sparse_coding import Dictionary

__all__ = [
    "MAGIC",
    "VERSION",
    "SECTIONS",
    "IndexFormatError",
    "IndexBundle",
    "save_index",
    "load_index",
    "encode_value",
    "decode_value",
]

MAGIC = b"PMFOREST"
VERSION = 1
SECTIONS = ("dataset", "trees", "pm", "dicts", "ann_codes", "novelty")
_ENTRY = struct.Struct("<16sQQI")
_HEAD = struct.Struct("<8sII")


class IndexFormatError(ValueError):
    """Unreadable index file: bad magic, unsupported version, truncation or corruption."""


# -- value encoding ------------------------------------------------------------

def _enc(v, out: list):
    if v is None:
        out.append(b"N")
    elif isinstance(v, (bool, np.bool_)):
        out.append(b"T" if v else b"F")
    elif isinstance(v, (int, np.integer)):
        v = int(v)
        out.append(b"i" + struct.pack("<q", v) if v < 2**63 else b"u" + struct.pack("<Q", v))
    elif isinstance(v, (float, np.floating)):
        out.append(b"f" + struct.pack("<d", float(v)))
    elif isinstance(v, str):
        b = v.encode("utf-8")
        out.append(b"s" + struct.pack("<I", len(b)) + b)
    elif isinstance(v, np.ndarray):
        a = np.ascontiguousarray(v)
        a = a.astype(a.dtype.newbyteorder("<")) if a.dtype.byteorder == ">" else a
        dt = a.dtype.str.encode("ascii")
        out.append(b"a" + struct.pack("<B", len(dt)) + dt + struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    elif isinstance(v, (list, tuple)):
        out.append(b"l" + struct.pack("<I", len(v)))
        for item in v:
            _enc(item, out)
    elif isinstance(v, dict):
        out.append(b"d" + struct.pack("<I", len(v)))
        for k, item in v.items():
            _enc(str(k), out)
            _enc(item, out)
    else:
        raise TypeError(f"cannot encode {type(v).__name__}")


def encode_value(v) -> bytes:
    out: list = []
    _enc(v, out)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IndexFormatError("truncated section payload")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def value(self):
        tag = self.take(1)
        if tag == b"N":
            return None
        if tag == b"T":
            return True
        if tag == b"F":
            return False
        if tag == b"i":
            return self.unpack("<q")[0]
        if tag == b"u":
            return self.unpack("<Q")[0]
        if tag == b"f":
            return self.unpack("<d")[0]
        if tag == b"s":
            (n,) = self.unpack("<I")
            return self.take(n).decode("utf-8")
        if tag == b"a":
            (n,) = self.unpack("<B")
            dt = np.dtype(self.take(n).decode("ascii"))
            (ndim,) = self.unpack("<I")
            shape = self.unpack(f"<{ndim}Q") if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            raw = self.take(count * dt.itemsize)
            return np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        if tag == b"l":
            (n,) = self.unpack("<I")
            return [self.value() for _ in range(n)]
        if tag == b"d":
            (n,) = self.unpack("<I")
            out = {}
            for _ in range(n):
                k = self.value()
                out[k] = self.value()
            return out
        raise IndexFormatError(f"unknown value tag {tag!r}")


def decode_value(buf: bytes):
    r = _Reader(buf)
    v = r.value()
    if r.pos != len(buf):
        raise IndexFormatError("trailing bytes after section value")
    return v


# -- model state ---------------------------------------------------------------

def _tree_state(t: PartitionTree) -> dict:
    n = t.n_nodes
    normal = np.zeros((n, t.dim))
    for i, v in enumerate(t.normal):
        if v is not None:
            normal[i] = v
    counts = np.array([-1 if m is None else m.size for m in t.members], dtype=np.int64)
    ids = [m for m in t.members if m is not None]
    members = np.concatenate(ids).astype(np.int64) if ids else np.zeros(0, dtype=np.int64)
    return {
        "rule": t.rule, "leaf_capacity": t.leaf_capacity, "seed": t.seed, "root": t.root,
        "axis": np.asarray(t.axis, dtype=np.int64), "normal": normal,
        "has_normal": np.array([v is not None for v in t.normal], dtype=np.bool_),
        "offset": np.asarray(t.offset, dtype=np.float64),
        "left": np.asarray(t.left, dtype=np.int64), "right": np.asarray(t.right, dtype=np.int64),
        "parent": np.asarray(t.parent, dtype=np.int64),
        "member_counts": counts, "members": members,
    }


def _tree_from_state(s: dict, points: np.ndarray) -> PartitionTree:
    t = PartitionTree(points, rule=s["rule"], leaf_capacity=s["leaf_capacity"], seed=s["seed"])
    t.root = s["root"]
    t.axis = s["axis"].tolist()
    t.normal = [s["normal"][i].copy() if h else None for i, h in enumerate(s["has_normal"])]
    t.offset = s["offset"].tolist()
    t.left = s["left"].tolist()
    t.right = s["right"].tolist()
    t.parent = s["parent"].tolist()
    members, pos = [], 0
    for c in s["member_counts"].tolist():
        if c < 0:
            members.append(None)
        else:
            members.append(s["members"][pos:pos + c].copy())
            pos += c
    t.members = members
    return t


def _pm_state(pm: PMTree) -> dict:
    return {"widths": np.asarray(pm.partition.widths, dtype=np.int64),
            "perm": None if pm.perm is None else np.asarray(pm.perm, dtype=np.int64),
            "seed": pm.seed}


def _pm_from_state(s: dict, tree_states: list, points: np.ndarray) -> PMTree:
    partition = BlockPartition.from_widths(s["widths"].tolist())
    perm = s["perm"]
    Xp = points if perm is None else points[:, perm]
    subtrees = [_tree_from_state(ts, np.ascontiguousarray(Xp[:, sl]))
                for ts, sl in zip(tree_states, partition.slices())]
    pm = PMTree(partition, subtrees, np.array(points), perm, s["seed"])
    pm.check_bookkeeping()
    return pm


@dataclass(eq=False)
class IndexBundle:
    """Everything a CLI build produces: data, forest, optional ANN and novelty models."""

    points: np.ndarray
    forest: PMForest | None = None
    ann: AnnIndex | None = None
    novelty: NoveltyModel | None = None
    meta: dict = field(default_factory=dict)

    def to_sections(self) -> dict:
        trees = [] if self.forest is None else [[_tree_state(t) for t in pm.subtrees] for pm in self.forest.trees]
        pms = [] if self.forest is None else [_pm_state(pm) for pm in self.forest.trees]
        dicts = {"ann": None if self.ann is None else self.ann.dictionary.atoms}
        ann = None if self.ann is None else {
            "codes": self.ann.codes, "lam": self.ann.lam, "max_iters": self.ann.max_iters, "tol": self.ann.tol,
        }
        nov = None
        if self.novelty is not None:
            m = self.novelty
            nov = {
                "points": m.pm.points, "pm": _pm_state(m.pm), "trees": [_tree_state(t) for t in m.pm.subtrees],
                "dictionary": m.dictionary.atoms, "quantiles": m.quantiles,
                "threshold_quantile": m.threshold_quantile, "lam": m.lam, "residual_mode": m.residual_mode,
                "atom_add_quantile": m.atom_add_quantile, "max_iters": m.max_iters, "tol": m.tol,
            }
        return {
            "dataset": {"points": np.asarray(self.points, dtype=np.float64), "meta": dict(self.meta)},
            "trees": trees,
            "pm": pms,
            "dicts": dicts,
            "ann_codes": ann,
            "novelty": nov,
        }

    @classmethod
    def from_sections(cls, sec: dict) -> "IndexBundle":
        points = sec["dataset"]["points"]
        forest = None
        if sec["pm"]:
            forest = PMForest([_pm_from_state(s, ts, points) for s, ts in zip(sec["pm"], sec["trees"])])
        ann = None
        if sec["ann_codes"] is not None:
            a = sec["ann_codes"]
            ann = AnnIndex(Dictionary(sec["dicts"]["ann"]), a["codes"], points, a["lam"], a["max_iters"], a["tol"])
        nov = None
        if sec["novelty"] is not None:
            s = sec["novelty"]
            nov = NoveltyModel(_pm_from_state(s["pm"], s["trees"], s["points"]), Dictionary(s["dictionary"]),
                               s["quantiles"], s["threshold_quantile"], s["lam"], s["residual_mode"],
                               s["atom_add_quantile"], s["max_iters"], s["tol"])
        return cls(points, forest, ann, nov, sec["dataset"]["meta"])


# -- file I/O ------------------------------------------------------------------

def _serialize(sections: dict, version: int = VERSION) -> bytes:
    bodies = [(name, encode_value(sections[name])) for name in SECTIONS]
    offset = _HEAD.size + _ENTRY.size * len(bodies)
    table = []
    for name, body in bodies:
        table.append(_ENTRY.pack(name.encode("ascii"), offset, len(body), zlib.crc32(body)))
        offset += len(body)
    return _HEAD.pack(MAGIC, version, len(bodies)) + b"".join(table) + b"".join(b for _, b in bodies)


def save_index(path, bundle: IndexBundle, version: int = VERSION):
    """Write atomically: a temporary file in the target directory is renamed into place."""
    data = _serialize(bundle.to_sections(), version)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".pmf-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_sections(data: bytes) -> dict:
    if len(data) < _HEAD.size:
        raise IndexFormatError("truncated header")
    magic, version, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}; not an index file")
    if version != VERSION:
        raise IndexFormatError(f"unsupported index version {version} (this build reads version {VERSION})")
    if len(data) < _HEAD.size + count * _ENTRY.size:
        raise IndexFormatError("truncated section table")
    out = {}
    for i in range(count):
        raw, off, length, crc = _ENTRY.unpack_from(data, _HEAD.size + i * _ENTRY.size)
        name = raw.rstrip(b"\0").decode("ascii")
        if off + length > len(data):
            raise IndexFormatError(f"truncated section {name!r}")
        body = data[off:off + length]
        if zlib.crc32(body) != crc:
            raise IndexFormatError(f"checksum mismatch in section {name!r}")
        out[name] = decode_value(body)
    missing = [s for s in SECTIONS if s not in out]
    if missing:
        raise IndexFormatError(f"missing sections {missing}")
    return out


def load_index(path) -> IndexBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    return IndexBundle.from_sections(read_sections(data))
