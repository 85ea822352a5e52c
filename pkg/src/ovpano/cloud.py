"""Point-cloud data model, PLY I/O and voxel subsampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

DEFAULT_GRAY = 0.5

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NUMPY_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
                 "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    """Malformed PLY input. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    gt_semantic: Optional[np.ndarray] = None
    gt_instance: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        n = len(self.positions)
        if n < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite coordinates")
        if self.colors is None:
            self.colors = np.full((n, 3), DEFAULT_GRAY)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if self.colors.shape != (n, 3):
            raise ValueError(f"colors must be ({n}, 3), got {self.colors.shape}")
        if np.any(~np.isfinite(self.colors)) or self.colors.min() < 0 or self.colors.max() > 1:
            raise ValueError("colors must lie within [0, 1]")
        for name in ("gt_semantic", "gt_instance"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(arr, dtype=np.int64)
                if arr.shape != (n,):
                    raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
                setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_labels(self) -> bool:
        return self.gt_semantic is not None

    def subset(self, index) -> "PointCloud":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return PointCloud(self.positions[index], self.colors[index],
                          pick(self.gt_semantic), pick(self.gt_instance))


@dataclass
class FeatureField:
    """Per-point lifted feature vectors with the number of pixels averaged into each."""

    features: np.ndarray
    hit_count: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be (N, C)")
        if self.hit_count is None:
            self.hit_count = np.zeros(len(self.features), dtype=np.int64)
        self.hit_count = np.asarray(self.hit_count, dtype=np.int64)
        if self.hit_count.shape != (len(self.features),):
            raise ValueError("hit_count length must match features")
        if np.any(self.hit_count < 0):
            raise ValueError("hit_count must be non-negative")
        if not np.all(np.isfinite(self.features[self.hit_count > 0])):
            raise ValueError("defined feature vectors must be finite")

    @classmethod
    def empty(cls, n: int, dim: int) -> "FeatureField":
        return cls(np.zeros((n, dim)), np.zeros(n, dtype=np.int64))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> np.ndarray:
        return self.hit_count > 0

    def __len__(self) -> int:
        return len(self.features)


FIELD_MAGIC = b"HFF1"


def write_field(path, fld: FeatureField) -> None:
    """``HFF1``, u32 N, u32 C, u32 hit counts, then float32 features, little-endian."""
    n, c = fld.features.shape
    Path(path).write_bytes(FIELD_MAGIC + struct.pack("<II", n, c)
                           + fld.hit_count.astype("<u4").tobytes()
                           + np.ascontiguousarray(fld.features, dtype="<f4").tobytes())


def read_field(path) -> FeatureField:
    data = Path(path).read_bytes()
    if data[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: bad feature-field magic {data[:4]!r}")
    n, c = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * n + 4 * n * c:
        raise ValueError(f"{path}: feature-field payload size mismatch")
    hits = np.frombuffer(data, dtype="<u4", count=n, offset=12).astype(np.int64)
    feats = np.frombuffer(data, dtype="<f4", count=n * c, offset=12 + 4 * n)
    return FeatureField(feats.astype(np.float64).reshape(n, c), hits)


# --------------------------------------------------------------------------- PLY

def _parse_header(data: bytes):
    end_tag = b"end_header"
    pos = data.find(end_tag)
    if not data.startswith(b"ply") or pos < 0:
        raise PlyError("missing 'ply' magic or 'end_header'", 0)
    eol = data.find(b"\n", pos)
    if eol < 0:
        raise PlyError("header not terminated by newline", pos)
    body_start = eol + 1
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    offset = 0
    for raw in data[:pos].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        toks = line.split()
        if not toks or toks[0] in ("ply", "comment", "obj_info"):
            pass
        elif toks[0] == "format":
            if len(toks) != 3:
                raise PlyError(f"bad format line {line!r}", offset)
            fmt = toks[1]
        elif toks[0] == "element":
            if len(toks) != 3 or not toks[2].isdigit():
                raise PlyError(f"bad element line {line!r}", offset)
            elements.append((toks[1], int(toks[2]), []))
        elif toks[0] == "property":
            if not elements:
                raise PlyError("property before any element", offset)
            if toks[1] == "list":
                raise PlyError("list properties are not supported", offset)
            if len(toks) != 3 or toks[1] not in _PLY_TYPES:
                raise PlyError(f"bad property line {line!r}", offset)
            elements[-1][2].append((toks[2], _PLY_TYPES[toks[1]]))
        else:
            raise PlyError(f"unknown header keyword {toks[0]!r}", offset)
        offset += len(raw) + 1
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}", 0)
    if not elements or elements[0][0] != "vertex":
        raise PlyError("first element must be 'vertex'", 0)
    return fmt, elements[0], body_start


def read_ply(path) -> tuple[Dict[str, np.ndarray], str]:
    """Read the vertex element of a PLY file into a dict of property arrays."""
    data = Path(path).read_bytes()
    fmt, (_, count, props), start = _parse_header(data)
    if fmt == "ascii":
        out = {name: np.empty(count, dtype=dt) for name, dt in props}
        lines = data[start:].split(b"\n")
        offset = start
        for i in range(count):
            if i >= len(lines):
                raise PlyError(f"truncated payload: expected {count} vertices, got {i}", offset)
            toks = lines[i].split()
            if len(toks) < len(props):
                raise PlyError(f"vertex {i} has {len(toks)} values, expected {len(props)}", offset)
            for (name, dt), tok in zip(props, toks):
                try:
                    val = float(tok) if dt[0] == "f" else int(tok)
                except ValueError:
                    raise PlyError(f"cannot parse {tok!r} for property {name}", offset) from None
                if name in "xyz" and not np.isfinite(val):
                    raise PlyError(f"non-finite coordinate {name} at vertex {i}", offset)
                out[name][i] = val
            offset += len(lines[i]) + 1
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(name, endian + dt) for name, dt in props])
        need = dtype.itemsize * count
        have = len(data) - start
        if have < need:
            raise PlyError(f"truncated payload: need {need} bytes, have {have}", start + have)
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        out = {name: rec[name].astype(rec[name].dtype.newbyteorder("=")) for name, _ in props}
        for axis in "xyz":
            if axis in out:
                bad = ~np.isfinite(out[axis])
                if bad.any():
                    i = int(np.argmax(bad))
                    raise PlyError(f"non-finite coordinate {axis} at vertex {i}",
                                   start + i * dtype.itemsize)
    return out, fmt


def write_ply(path, props: Dict[str, np.ndarray], binary: bool = True) -> None:
    """Write a vertex-only PLY. Property order follows dict order."""
    names = list(props)
    arrays = [np.asarray(props[k]) for k in names]
    count = len(arrays[0])
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
              f"element vertex {count}"]
    for name, arr in zip(names, arrays):
        header.append(f"property {_NUMPY_TO_PLY[arr.dtype.str[1:]]} {name}")
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        dtype = np.dtype([(n, "<" + a.dtype.str[1:]) for n, a in zip(names, arrays)])
        rec = np.empty(count, dtype=dtype)
        for n, a in zip(names, arrays):
            rec[n] = a
        payload = rec.tobytes()
    else:
        rows = []
        for i in range(count):
            rows.append(" ".join(repr(float(a[i])) if a.dtype.kind == "f" else str(int(a[i]))
                                 for a in arrays))
        payload = ("\n".join(rows) + "\n").encode("ascii")
    Path(path).write_bytes(head + payload)


def load_cloud(path, format: Optional[str] = None) -> PointCloud:
    """Load a PLY point cloud.

    ``format`` may be ``"ply_ascii"`` or ``"ply_binary"``; when given it must
    agree with the file header. Missing colors default to mid-gray and 8-bit
    colors are scaled to [0, 1].
    """
    props, fmt = read_ply(path)
    if format is not None:
        expect = "ascii" if format == "ply_ascii" else "binary"
        if not fmt.startswith(expect):
            raise PlyError(f"file is {fmt}, requested {format}", 0)
    for axis in "xyz":
        if axis not in props:
            raise PlyError(f"missing vertex property {axis!r}", 0)
    positions = np.stack([props[a].astype(np.float64) for a in "xyz"], axis=1)
    colors = None
    if all(c in props for c in ("red", "green", "blue")):
        colors = np.stack([props[c] for c in ("red", "green", "blue")], axis=1)
        if colors.dtype.kind in "iu":
            colors = colors.astype(np.float64) / 255.0
        colors = colors.astype(np.float64)
    return PointCloud(positions, colors, props.get("gt_sem"), props.get("gt_inst"))


def cloud_properties(cloud: PointCloud) -> Dict[str, np.ndarray]:
    """Vertex properties for ``cloud``; colors stay 8-bit when that is lossless."""
    props = {"x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2]}
    as_u8 = np.round(cloud.colors * 255.0)
    if np.array_equal(as_u8 / 255.0, cloud.colors):
        cols = as_u8.astype(np.uint8)
    else:
        cols = cloud.colors
    props.update(red=cols[:, 0], green=cols[:, 1], blue=cols[:, 2])
    if cloud.gt_semantic is not None:
        props["gt_sem"] = cloud.gt_semantic.astype(np.int32)
    if cloud.gt_instance is not None:
        props["gt_inst"] = cloud.gt_instance.astype(np.int32)
    return props


def save_cloud(cloud: PointCloud, path, binary: bool = True, extra: Optional[dict] = None) -> None:
    props = cloud_properties(cloud)
    if extra:
        props.update(extra)
    write_ply(path, props, binary=binary)


# ------------------------------------------------------------------ subsampling

def _majority(labels: np.ndarray, group: np.ndarray, n_groups: int) -> np.ndarray:
    # lexsort by (label, group) then pick the longest run per group; ties -> smallest label
    order = np.lexsort((labels, group))
    g, lab = group[order], labels[order]
    change = np.r_[True, (g[1:] != g[:-1]) | (lab[1:] != lab[:-1])]
    starts = np.flatnonzero(change)
    run_len = np.diff(np.r_[starts, len(g)])
    run_group, run_label = g[starts], lab[starts]
    # stable sort by count descending keeps the smaller label first on ties
    best = np.lexsort((run_label, -run_len, run_group))
    first = np.r_[True, run_group[best][1:] != run_group[best][:-1]]
    out = np.empty(n_groups, dtype=np.int64)
    out[run_group[best][first]] = run_label[best][first]
    return out


def voxel_keys(positions: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(positions / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel: centroid, mean color, majority-vote labels.

    Output is ordered by voxel index (lexicographic on integer x, y, z).
    """
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    keys = voxel_keys(cloud.positions, voxel)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    pos = np.zeros((m, 3))
    col = np.zeros((m, 3))
    np.add.at(pos, inverse, cloud.positions)
    np.add.at(col, inverse, cloud.colors)
    pos /= counts[:, None]
    col = np.clip(col / counts[:, None], 0.0, 1.0)
    sem = inst = None
    if cloud.gt_semantic is not None:
        sem = _majority(cloud.gt_semantic, inverse, m)
    if cloud.gt_instance is not None:
        inst = _majority(cloud.gt_instance, inverse, m)
    return PointCloud(pos, col, sem, inst)

