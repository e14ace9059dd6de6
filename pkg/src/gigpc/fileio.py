"""Readers and writers: PLY, OBJ, run configs, dataset folders, checkpoints."""
from __future__ import annotations

import ast
import csv
import dataclasses
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .networks import EncoderConfig, GeneratorConfig, Model, parameter_init
from .pointcloud import Mesh


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_ply_header(raw: bytes, where: str):
    if not raw.startswith(b"ply"):
        raise DataError(f"{where}: not a PLY file (missing 'ply' magic at byte 0)")
    end = raw.find(b"end_header")
    if end < 0:
        raise DataError(f"{where}: header has no end_header line")
    nl = raw.find(b"\n", end)
    body = len(raw) if nl < 0 else nl + 1
    fmt = None
    elements: list[_Element] = []
    offset = 0
    for line in raw[:end].split(b"\n"):
        text = line.decode("ascii", "replace").strip()
        at = offset
        offset += len(line) + 1
        parts = text.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise DataError(f"{where}: unsupported format {text!r} at byte {at}")
            fmt = parts[1]
        elif parts[0] == "element":
            try:
                elements.append(_Element(parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise DataError(f"{where}: bad element line {text!r} at byte {at}") from None
        elif parts[0] == "property":
            if not elements:
                raise DataError(f"{where}: property before any element at byte {at}")
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise DataError(f"{where}: unknown list type in {text!r} at byte {at}")
                elements[-1].props.append((parts[4], (_PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise DataError(f"{where}: unsupported property {text!r} at byte {at}")
        else:
            raise DataError(f"{where}: unexpected header line {text!r} at byte {at}")
    if fmt is None:
        raise DataError(f"{where}: header declares no format")
    return fmt, elements, body


def _read_binary(raw: bytes, pos: int, el: _Element, where: str):
    fixed = all(isinstance(t, str) for _, t in el.props)
    if fixed:
        dt = np.dtype([(n, "<" + t) for n, t in el.props])
        need = dt.itemsize * el.count
        if pos + need > len(raw):
            raise DataError(f"{where}: element '{el.name}' truncated; needs {need} bytes "
                            f"from byte {pos}, file ends at byte {len(raw)}")
        return np.frombuffer(raw, dtype=dt, count=el.count, offset=pos), pos + need
    rows = []
    for _ in range(el.count):
        row = {}
        for name, t in el.props:
            if isinstance(t, str):
                size = np.dtype(t).itemsize
                if pos + size > len(raw):
                    raise DataError(f"{where}: element '{el.name}' truncated at byte {pos}")
                row[name] = np.frombuffer(raw, "<" + t, 1, pos)[0]
                pos += size
            else:
                ct, it = t
                csz = np.dtype(ct).itemsize
                if pos + csz > len(raw):
                    raise DataError(f"{where}: element '{el.name}' truncated at byte {pos}")
                n = int(np.frombuffer(raw, "<" + ct, 1, pos)[0])
                pos += csz
                isz = np.dtype(it).itemsize * n
                if pos + isz > len(raw):
                    raise DataError(f"{where}: list in '{el.name}' truncated at byte {pos}")
                row[name] = np.frombuffer(raw, "<" + it, n, pos)
                pos += isz
        rows.append(row)
    return rows, pos


def _read_ascii(raw: bytes, pos: int, elements: list[_Element], where: str):
    lines = raw[pos:].split(b"\n")
    offsets = np.cumsum([pos] + [len(l) + 1 for l in lines])
    cursor = 0
    out = {}
    for el in elements:
        rows = []
        for _ in range(el.count):
            while cursor < len(lines) and not lines[cursor].strip():
                cursor += 1
            if cursor >= len(lines):
                raise DataError(f"{where}: element '{el.name}' truncated at byte {offsets[-1] - 1}")
            at = int(offsets[cursor])
            tokens = lines[cursor].split()
            cursor += 1
            row, t = {}, 0
            try:
                for name, typ in el.props:
                    if isinstance(typ, str):
                        row[name] = float(tokens[t])
                        t += 1
                    else:
                        n = int(tokens[t])
                        row[name] = np.array([int(x) for x in tokens[t + 1:t + 1 + n]])
                        if len(row[name]) != n:
                            raise IndexError
                        t += 1 + n
            except (IndexError, ValueError):
                raise DataError(f"{where}: malformed '{el.name}' row at byte {at}") from None
            rows.append(row)
        out[el.name] = rows
    return out


def _ply_contents(path) -> tuple[np.ndarray, np.ndarray | None]:
    where = str(path)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{where}: {exc.strerror}") from None
    fmt, elements, pos = _parse_ply_header(raw, where)
    names = [e.name for e in elements]
    if "vertex" not in names:
        raise DataError(f"{where}: no vertex element")
    vert_el = elements[names.index("vertex")]
    vprops = [n for n, _ in vert_el.props]
    for axis in "xyz":
        if axis not in vprops:
            raise DataError(f"{where}: vertex element lacks property '{axis}'")
    for n, t in vert_el.props:
        if n in ("x", "y", "z") and t not in ("f4", "f8"):
            raise DataError(f"{where}: coordinate '{n}' must be float or double")
    data = {}
    if fmt == "ascii":
        parsed = _read_ascii(raw, pos, elements, where)
        for el in elements:
            data[el.name] = parsed[el.name]
    else:
        for el in elements:
            data[el.name], pos = _read_binary(raw, pos, el, where)
    v = data["vertex"]
    if isinstance(v, np.ndarray):
        pts = np.stack([v[a].astype(np.float64) for a in "xyz"], axis=1)
    else:
        pts = np.array([[r[a] for a in "xyz"] for r in v], dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise DataError(f"{where}: non-finite vertex coordinates")
    faces = None
    if "face" in data:
        el = elements[names.index("face")]
        key = next((n for n, t in el.props if not isinstance(t, str)), None)
        if key is None:
            raise DataError(f"{where}: face element has no index list")
        tris = []
        for i, r in enumerate(data["face"]):
            idx = [int(x) for x in r[key]]
            if len(idx) < 3:
                raise DataError(f"{where}: face {i} has fewer than 3 vertices")
            if min(idx) < 0 or max(idx) >= len(pts):
                raise DataError(f"{where}: face {i} references a vertex out of range")
            tris += [(idx[0], idx[j], idx[j + 1]) for j in range(1, len(idx) - 1)]
        faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return pts, faces


def read_ply(path) -> np.ndarray:
    """Vertex coordinates of an ascii or binary little-endian PLY file as (n, 3) float64."""
    return _ply_contents(path)[0]


def read_ply_mesh(path) -> Mesh:
    pts, faces = _ply_contents(path)
    if faces is None:
        raise DataError(f"{path}: PLY file has no faces")
    return Mesh(pts, faces)


def ply_bytes(points, faces=None) -> bytes:
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"write_ply: expected (n, 3) points, got {P.shape}")
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(P)}",
            "property double x", "property double y", "property double z"]
    body = P.astype("<f8").tobytes()
    if faces is not None:
        F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        head += [f"element face {len(F)}", "property list uchar int vertex_indices"]
        dt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
        rec = np.empty(len(F), dtype=dt)
        rec["n"] = 3
        rec["i"] = F
        body += rec.tobytes()
    head.append("end_header")
    return ("\n".join(head) + "\n").encode("ascii") + body


def write_ply(path, points, faces=None) -> None:
    """Binary little-endian float64 PLY; faces are optional triangles."""
    Path(path).write_bytes(ply_bytes(points, faces))


# ---------------------------------------------------------------- OBJ

def read_obj(path) -> Mesh:
    """Vertices and faces of a Wavefront OBJ; polygons are fan-triangulated."""
    verts, tris = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad vertex line") from None
            if len(verts[-1]) != 3:
                raise DataError(f"{path}:{lineno}: vertex needs three coordinates")
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad face index {tok!r}") from None
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    raise DataError(f"{path}:{lineno}: face index {tok} out of range")
                idx.append(i)
            if len(idx) < 3:
                raise DataError(f"{path}:{lineno}: face needs at least three vertices")
            tris += [(idx[0], idx[j], idx[j + 1]) for j in range(1, len(idx) - 1)]
    if not verts:
        raise DataError(f"{path}: no vertices")
    return Mesh(np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3))


def read_mesh(path) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply_mesh(path)
    raise DataError(f"{path}: unsupported mesh format {suffix!r}")


# ---------------------------------------------------------------- config files

def parse_config(text: str, schema: dict[str, type], where: str = "config") -> dict:
    """``key = value`` lines with ``#`` comments; keys outside ``schema`` are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{where}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise DataError(f"{where}:{lineno}: unknown key {key!r}")
        typ = schema[key]
        try:
            if typ is bool:
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError
                out[key] = value.lower() in ("true", "1", "yes")
            else:
                out[key] = typ(value)
        except ValueError:
            raise DataError(f"{where}:{lineno}: {key} expects {typ.__name__}, got {value!r}") from None
    return out


def read_config(path, schema: dict[str, type]) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    return parse_config(text, schema, str(path))


def format_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


# ---------------------------------------------------------------- dataset folders

@dataclass
class Dataset:
    names: list[str]
    clouds: np.ndarray
    labels: np.ndarray | None = None
    categories: list[str] | None = None


def _split_names(root: Path, split: str | None) -> list[str]:
    if split is None:
        return sorted(p.name for p in root.glob("*.ply"))
    listing = root / f"{split}.txt"
    if not listing.exists():
        raise DataError(f"{root}: no {split}.txt")
    return [l.strip() for l in listing.read_text().splitlines() if l.strip()]


def load_dataset(root, split: str | None = None, conditional: bool = False,
                 categories: list[str] | None = None) -> Dataset:
    """Load a folder of .ply clouds, optionally restricted to a split listing.

    All clouds must have the same number of points. With ``conditional`` the
    folder's labels.csv (``filename,category``) provides one-hot labels over
    the sorted category names, or over ``categories`` when given.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    names = _split_names(root, split)
    if not names:
        raise DataError(f"{root}: no point clouds found")
    clouds = [read_ply(root / n) for n in names]
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise DataError(f"{root}: clouds have differing point counts {sorted(sizes)}")
    ds = Dataset(names, np.stack(clouds))
    if conditional:
        table = root / "labels.csv"
        if not table.exists():
            raise DataError(f"{root}: conditional training needs labels.csv")
        with open(table, newline="") as fh:
            mapping = {row[0].strip(): row[1].strip() for row in csv.reader(fh) if len(row) >= 2}
        missing = [n for n in names if n not in mapping]
        if missing:
            raise DataError(f"{table}: no label for {missing[0]}")
        ds.categories = categories or sorted(set(mapping[n] for n in names))
        ds.labels = one_hot([mapping[n] for n in names], ds.categories)
    return ds


def one_hot(values: list[str], categories: list[str]) -> np.ndarray:
    out = np.zeros((len(values), len(categories)))
    for i, v in enumerate(values):
        if v not in categories:
            raise DataError(f"unknown category {v!r}; known: {categories}")
        out[i, categories.index(v)] = 1.0
    return out


# ---------------------------------------------------------------- checkpoints

MAGIC = b"GIGCKPT1"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return repr(v)
    return str(v)


def _config_lines(prefix: str, cfg) -> list[str]:
    return [f"{prefix}.{f.name}={_fmt(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]


def _config_from(prefix: str, cls, header: dict):
    kw = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in header:
            raise DataError(f"checkpoint header lacks {key}")
        raw = header[key]
        kw[f.name] = {"true": True, "false": False}[raw] if raw in ("true", "false") \
            else ast.literal_eval(raw)
    return cls(**kw)


def checkpoint_bytes(model: Model, meta: dict[str, str] | None = None) -> bytes:
    """Serialise configuration, metadata and named float64 parameters."""
    lines = ["format=1"] + _config_lines("encoder", model.encoder) \
        + _config_lines("generator", model.generator)
    for k in sorted(meta or {}):
        v = str(meta[k])
        if "\n" in v or "=" in k:
            raise ValueError(f"checkpoint metadata {k!r} must be a single line")
        lines.append(f"meta.{k}={v}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, model: Model, meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    where = str(path)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{where}: {exc.strerror}") from None
    return parse_checkpoint(raw, where)


def parse_checkpoint(raw: bytes, where: str = "checkpoint") -> tuple[Model, dict[str, str]]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise DataError(f"{where}: truncated at byte {pos} (needed {n} more bytes)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise DataError(f"{where}: not a checkpoint (bad magic at byte 0)")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        text = take(hlen).decode("utf-8")
    except UnicodeDecodeError:
        raise DataError(f"{where}: header is not UTF-8") from None
    header = dict(line.split("=", 1) for line in text.splitlines() if line)
    if header.get("format") != "1":
        raise DataError(f"{where}: unsupported checkpoint format {header.get('format')!r}")
    try:
        enc = _config_from("encoder", EncoderConfig, header)
        gen = _config_from("generator", GeneratorConfig, header)
    except (ValueError, SyntaxError, TypeError) as exc:
        raise DataError(f"{where}: bad configuration in header ({exc})") from None
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64)) * 8
        arr = np.frombuffer(take(size), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
    if pos != len(raw):
        raise DataError(f"{where}: {len(raw) - pos} trailing bytes after parameters")
    expected = Model(enc, gen, {})
    reference = parameter_init(enc, gen, 0)
    for name, t in reference.items():
        if name not in params:
            raise DataError(f"{where}: missing parameter {name}")
        if params[name].shape != t.shape:
            raise DataError(f"{where}: parameter {name} has shape {params[name].shape}, "
                            f"expected {t.shape}")
    extra = set(params) - set(reference)
    if extra:
        raise DataError(f"{where}: unexpected parameter {sorted(extra)[0]}")
    expected.params = {name: params[name] for name in reference}
    return expected, meta


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
