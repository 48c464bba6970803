"""Datasets, point-cloud file formats and the on-disk artifact container."""

from __future__ import annotations

import hashlib
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactNotFoundError, IntegrityError, ParseError, ShapeError
from .geometry import PointCloud, normalize_cloud
from .losses import rotate

FAMILIES = ("ellipsoid", "box", "cylinder", "lamp")
ARTIFACT_ARRAYS = ("W", "C0", "indices", "M", "F_mh")


@dataclass
class Dataset:
    clouds: list
    classes: list
    split: str = "train"

    def __post_init__(self):
        ids = [c.id for c in self.clouds]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")
        for c in self.clouds:
            if c.label is None or not 0 <= c.label < len(self.classes):
                raise ValueError(f"sample {c.id!r} has label {c.label} outside the class table")

    def __len__(self):
        return len(self.clouds)

    def __iter__(self):
        return iter(self.clouds)

    def __getitem__(self, i):
        return self.clouds[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def by_id(self) -> dict:
        return {c.id: c for c in self.clouds}


# --- synthetic shapes ------------------------------------------------------


def _sphere_dirs(rng, n):
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _ellipsoid(rng, n):
    axes = rng.uniform(0.5, 1.2, size=3)
    return _sphere_dirs(rng, n) * axes


def _box(rng, n):
    half = rng.uniform(0.4, 1.1, size=3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), face_axis] = sign * half[face_axis]
    return pts


def _cylinder(rng, n):
    r = rng.uniform(0.3, 0.8)
    h = rng.uniform(0.6, 1.4)
    side, cap = 2 * np.pi * r * 2 * h, 2 * np.pi * r * r
    on_side = rng.uniform(size=n) < side / (side + cap)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n)))
    y = np.where(on_side, rng.uniform(-h, h, size=n), rng.choice([-h, h], size=n))
    return np.stack([rad * np.cos(theta), y, rad * np.sin(theta)], axis=1)


def _lamp(rng, n):
    # foot and shade lobes joined by a stem; shade and foot lean in different
    # directions so the shape has no vertical mirror plane
    stem_h = rng.uniform(0.8, 1.4)
    foot_r = rng.uniform(0.3, 0.5)
    shade_r = rng.uniform(0.35, 0.6)
    lean = rng.uniform(0.25, 0.5)
    n_foot, n_stem = n // 4, n // 4
    n_shade = n - n_foot - n_stem
    foot = _sphere_dirs(rng, n_foot) * [foot_r, 0.35 * foot_r, foot_r]
    foot += [0.0, -stem_h / 2, 0.5 * lean]
    t = rng.uniform(-0.5, 0.5, size=n_stem)
    ang = rng.uniform(0, 2 * np.pi, size=n_stem)
    stem = np.stack([0.04 * np.cos(ang) + lean * (t + 0.5), t * stem_h, 0.04 * np.sin(ang)], axis=1)
    shade = _sphere_dirs(rng, n_shade) * [shade_r, 0.7 * shade_r, shade_r]
    shade += [lean + 0.3 * shade_r, stem_h / 2, 0.0]
    return np.concatenate([foot, stem, shade])


_GENERATORS = {"ellipsoid": _ellipsoid, "box": _box, "cylinder": _cylinder, "lamp": _lamp}


def synth_dataset(classes=4, per_class=100, points=512, seed=0, split="train", rotate_up=True) -> Dataset:
    """Surface samples of parametric families with random proportions and a
    random rotation about the up axis; every cloud is normalized."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if classes > len(FAMILIES):
        raise ValueError(f"only {len(FAMILIES)} shape families available, asked for {classes}")
    rng = np.random.default_rng(seed)
    clouds = []
    for k in range(per_class):
        for y in range(classes):
            pts = _GENERATORS[FAMILIES[y]](rng, points)
            if rotate_up:
                pts = rotate(pts, rng.uniform(0, 2 * np.pi))
            clouds.append(normalize_cloud(PointCloud(pts, label=y, id=f"{split}-{FAMILIES[y]}-{k:04d}")))
    return Dataset(clouds, list(FAMILIES[:classes]), split)


# --- file formats ----------------------------------------------------------


def _data_lines(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def _floats(line, lineno, path, count=None):
    try:
        vals = [float(t) for t in line.replace(",", " ").split()]
    except ValueError:
        raise ParseError(f"cannot parse numbers from {line!r}", lineno, path) from None
    if count is not None and len(vals) < count:
        raise ParseError(f"expected {count} values, got {len(vals)}", lineno, path)
    return vals


def _parse_off(text, path):
    lines = list(_data_lines(text))
    if not lines or not lines[0][1].startswith("OFF"):
        raise ParseError("missing OFF header", lines[0][0] if lines else 1, path)
    rest = lines[0][1][3:].strip()
    pos = 1
    if rest:
        # some exporters glue the counts onto the header ("OFF490 998 0")
        counts_line, counts_no = rest, lines[0][0]
    else:
        if len(lines) < 2:
            raise ParseError("missing vertex/face counts", lines[0][0] + 1, path)
        counts_no, counts_line = lines[1]
        pos = 2
    try:
        nv, nf = [int(t) for t in counts_line.split()[:2]]
    except ValueError:
        raise ParseError(f"bad counts line {counts_line!r}", counts_no, path) from None
    if len(lines) - pos < nv + nf:
        last = lines[-1][0]
        raise ParseError(f"declared {nv} vertices and {nf} faces, file ends early", last, path)
    pts = [_floats(line, no, path, 3)[:3] for no, line in lines[pos:pos + nv]]
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def _parse_ply(text, path):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1, path)
    nv = None
    props = []
    in_vertex = False
    end = None
    for no, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ParseError(f"only ascii PLY is supported, got {tok[1]}", no, path)
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                nv = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = no
            break
    if end is None:
        raise ParseError("header has no end_header", len(lines), path)
    if nv is None:
        raise ParseError("no vertex element declared", end, path)
    try:
        cols = [props.index(a) for a in "xyz"]
    except ValueError:
        raise ParseError("vertex element lacks x/y/z properties", end, path) from None
    body = lines[end:end + nv]
    if len(body) < nv:
        raise ParseError(f"declared {nv} vertices, found {len(body)}", end + len(body), path)
    pts = []
    for k, raw in enumerate(body):
        vals = _floats(raw, end + k + 1, path, len(props))
        pts.append([vals[c] for c in cols])
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def _parse_csv(text, path):
    pts = []
    for no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 3:
            raise ParseError(f"expected x,y,z, got {raw!r}", no, path)
        pts.append(_floats(raw, no, path, 3))
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


_PARSERS = {"off": _parse_off, "ply": _parse_ply, "csv": _parse_csv}


def _format_of(path, fmt):
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    fmt = {"ply-ascii": "ply"}.get(fmt, fmt)
    if fmt not in _PARSERS:
        raise ValueError(f"unknown point cloud format {fmt!r}")
    return fmt


def load_cloud(path, fmt=None, label=None, id=None) -> PointCloud:
    """Read vertices from OFF, ASCII PLY or x,y,z CSV; faces are ignored."""
    path = Path(path)
    pts = _PARSERS[_format_of(path, fmt)](path.read_text(), path)
    if pts.shape[0] == 0:
        raise ParseError("no vertices", None, path)
    return PointCloud(pts, label=label, id=id or path.stem)


def atomic_write(path, data, mode="w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_cloud(cloud, path, fmt=None):
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    fmt = _format_of(path, fmt)
    rows = "\n".join(",".join(repr(float(v)) for v in p) for p in pts)
    if fmt == "csv":
        text = rows + "\n"
    elif fmt == "ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
                  "property double x", "property double y", "property double z", "end_header"]
        text = "\n".join(header) + "\n" + rows.replace(",", " ") + "\n"
    else:
        raise ValueError("export supports ply and csv only")
    atomic_write(path, text)


def export_triplet(outdir, sample_id, original, recovered, deformed, fmt="ply") -> list:
    """original/recovered/deformed clouds under outdir/<sample_id>/."""
    d = Path(outdir) / sample_id
    paths = []
    for name, cloud in (("original", original), ("recovered", recovered), ("deformed", deformed)):
        p = d / f"{name}.{fmt}"
        export_cloud(cloud, p, fmt)
        paths.append(p)
    return paths


# --- artifact container ----------------------------------------------------
#
# A container is a directory holding one text manifest plus one payload file
# per entry.  Payloads are raw little-endian float64 blobs; the manifest
# records, for every array, its shape and byte range.  Payload names carry a
# content hash and the manifest swap (write temp, rename) is the commit point,
# so an interrupted save leaves the previous manifest and payloads intact.
#
#   bhaug-container 1
#   meta <key> <value>
#   entry <id> <payload-file> label=<int|->
#   array <id> <name> <f8|...> <d0xd1x...> <offset> <nbytes>

SCHEMA = 1
_DTYPE = "<f8"


@dataclass
class Entry:
    id: str
    payload: str
    label: int | None
    arrays: dict = field(default_factory=dict)  # name -> (shape, offset, nbytes)


class Container:
    def __init__(self, path):
        self.path = Path(path)
        self.meta: dict = {}
        self.entries: dict = {}
        if (self.path / "manifest.txt").exists():
            self._read_manifest()

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.txt"

    def _read_manifest(self):
        text = self.manifest_path.read_text()
        lines = text.splitlines()
        if not lines or lines[0].split() != ["bhaug-container", str(SCHEMA)]:
            raise IntegrityError(f"{self.manifest_path}: unknown manifest schema")
        for no, line in enumerate(lines[1:], start=2):
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "meta":
                self.meta[tok[1]] = " ".join(tok[2:])
            elif tok[0] == "entry":
                lab = tok[3].split("=", 1)[1]
                self.entries[tok[1]] = Entry(tok[1], tok[2], None if lab == "-" else int(lab))
            elif tok[0] == "array":
                eid, name, dtype, shape, off, nbytes = tok[1:7]
                if dtype != "f8":
                    raise IntegrityError(f"line {no}: unsupported element type {dtype}")
                shp = tuple(int(s) for s in shape.split("x")) if shape != "scalar" else ()
                self.entries[eid].arrays[name] = (shp, int(off), int(nbytes))
            else:
                raise IntegrityError(f"{self.manifest_path} line {no}: unknown record {tok[0]!r}")

    def _manifest_text(self):
        out = [f"bhaug-container {SCHEMA}"]
        out += [f"meta {k} {v}" for k, v in sorted(self.meta.items())]
        for e in self.entries.values():
            lab = "-" if e.label is None else str(e.label)
            out.append(f"entry {e.id} {e.payload} label={lab}")
            for name, (shape, off, nbytes) in e.arrays.items():
                shp = "x".join(str(s) for s in shape) if shape else "scalar"
                out.append(f"array {e.id} {name} f8 {shp} {off} {nbytes}")
        return "\n".join(out) + "\n"

    def __contains__(self, entry_id):
        return entry_id in self.entries

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list:
        return list(self.entries)

    def write_payload(self, entry_id, arrays: dict, label=None) -> Entry:
        """Write a payload file for an entry without touching the manifest."""
        if not re.fullmatch(r"[A-Za-z0-9_.\-]+", entry_id):
            raise ValueError(f"entry id {entry_id!r} has characters outside [A-Za-z0-9_.-]")
        blobs, layout, off = [], {}, 0
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype=_DTYPE)
            b = a.tobytes()
            layout[name] = (a.shape, off, len(b))
            blobs.append(b)
            off += len(b)
        data = b"".join(blobs)
        digest = hashlib.sha256(data).hexdigest()[:16]
        payload = f"{entry_id}.{digest}.bin"
        self.path.mkdir(parents=True, exist_ok=True)
        if not (self.path / payload).exists():
            atomic_write(self.path / payload, data, mode="wb")
        return Entry(entry_id, payload, label, layout)

    def commit(self, entries, meta=None):
        """Merge entries into the manifest and atomically replace it."""
        old = {e.id: e.payload for e in entries if e.id in self.entries}
        for e in entries:
            self.entries[e.id] = e
        if meta:
            self.meta.update({k: str(v) for k, v in meta.items()})
        atomic_write(self.manifest_path, self._manifest_text())
        live = {e.payload for e in self.entries.values()}
        for p in old.values():
            if p not in live and (self.path / p).exists():
                (self.path / p).unlink()

    def save(self, entry_id, arrays: dict, label=None, meta=None):
        self.commit([self.write_payload(entry_id, arrays, label)], meta)

    def load(self, entry_id, names=None) -> dict:
        if entry_id not in self.entries:
            raise ArtifactNotFoundError(f"no entry {entry_id!r} in {self.path}")
        e = self.entries[entry_id]
        data = (self.path / e.payload).read_bytes()
        spans = sorted((off, off + nb, name) for name, (_, off, nb) in e.arrays.items())
        for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise IntegrityError(f"entry {entry_id}: arrays {n0} and {n1} overlap")
        out = {}
        for name, (shape, off, nbytes) in e.arrays.items():
            if names is not None and name not in names:
                continue
            if int(np.prod(shape, dtype=np.int64)) * 8 != nbytes:
                raise IntegrityError(f"entry {entry_id}: array {name} shape {shape} does not match {nbytes} bytes")
            if off + nbytes > len(data):
                raise IntegrityError(f"entry {entry_id}: array {name} is truncated "
                                     f"(needs bytes {off}..{off + nbytes}, payload has {len(data)})")
            out[name] = np.frombuffer(data, dtype=_DTYPE, count=nbytes // 8, offset=off).reshape(shape).copy()
        if names is not None:
            missing = set(names) - set(out)
            if missing:
                raise ArtifactNotFoundError(f"entry {entry_id}: missing arrays {sorted(missing)}")
        return out


def save_dataset(dataset: Dataset, path):
    box = Container(path)
    entries = [box.write_payload(c.id, {"points": c.points}, c.label) for c in dataset]
    box.commit(entries, {"kind": "dataset", "split": dataset.split, "classes": ",".join(dataset.classes)})
    return box


def load_dataset(path) -> Dataset:
    box = Container(path)
    if box.meta.get("kind") != "dataset":
        raise IntegrityError(f"{path} is not a dataset container")
    clouds = [PointCloud(box.load(i)["points"], label=box.entries[i].label, id=i) for i in box.ids()]
    return Dataset(clouds, box.meta["classes"].split(","), box.meta.get("split", "train"))


def save_artifacts(path, sample_id, arrays: dict, label=None):
    Container(path).save(sample_id, {k: arrays[k] for k in arrays}, label, {"kind": "artifacts"})


def load_artifacts(path, sample_id, names=ARTIFACT_ARRAYS) -> dict:
    arrs = Container(path).load(sample_id, names)
    if "indices" in arrs:
        idx = arrs["indices"]
        if not np.array_equal(idx, np.round(idx)):
            raise IntegrityError(f"entry {sample_id}: control indices are not integral")
        arrs["indices"] = idx.astype(np.int64)
    return arrs


def save_model(path, name, model: dict, meta=None):
    """Checkpoint a dict of MlpParams as one container entry."""
    arrays = {}
    acts = []
    for key in sorted(model):
        p = model[key]
        for i, (W, b) in enumerate(zip(p.weights, p.biases)):
            arrays[f"{key}.W{i}"] = W
            arrays[f"{key}.b{i}"] = b
        acts.append(f"{key}:{'/'.join(p.activations)}")
    m = {"kind": "checkpoint", f"{name}.layout": ";".join(acts)}
    m.update(meta or {})
    Container(path).save(name, arrays, meta=m)


def load_model(path, name) -> dict:
    from .nn import MlpParams

    box = Container(path)
    arrays = box.load(name)
    layout = box.meta[f"{name}.layout"]
    model = {}
    for part in layout.split(";"):
        key, acts = part.split(":")
        acts = tuple(acts.split("/"))
        Ws = [arrays[f"{key}.W{i}"] for i in range(len(acts))]
        bs = [arrays[f"{key}.b{i}"] for i in range(len(acts))]
        model[key] = MlpParams(Ws, bs, acts)
    return model


def check_shape(name, arr, shape):
    if tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
