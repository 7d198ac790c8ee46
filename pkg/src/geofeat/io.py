"""Readers and writers for the on-disk artifacts.

Text: the ``GEOREC`` reconstruction file.  Binary (all little-endian):
``GDIM`` rasters, ``GDPK`` patch datasets, ``GDNW`` checkpoints and ``GDSC``
descriptor files.  Malformed input raises :class:`CorruptFile` carrying the
byte offset where reading went wrong.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptFile, ValidationError
from .evaluation import DescriptorSet
from .net import ConvSpec, NetParams
from .scene import Camera, Keypoint, SceneReconstruction, Track

GEOREC_HEADER = "GEOREC 1"
GDPK_VERSION = 1
GDNW_VERSION = 1
GDSC_VERSION = 1


def _fmt(v: float) -> str:
    return "%.9g" % v


def _write_bytes(path, data: bytes) -> None:
    # write-then-rename so a failed run never leaves a half-written artifact behind
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    """Sequential little-endian reader that reports the offset of any short read."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptFile(self.pos, f"{self.what}: truncated, wanted {n} bytes, "
                                        f"{len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        start = self.pos
        got = self.take(len(expected))
        if got != expected:
            raise CorruptFile(start, f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise CorruptFile(self.pos, f"{self.what}: {len(self.data) - self.pos} trailing bytes")


# --- GDIM -------------------------------------------------------------------

def encode_gdim(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValidationError("GDIM stores 2-D uint8 rasters")
    h, w = img.shape
    return b"GDIM" + struct.pack("<II", w, h) + np.ascontiguousarray(img).tobytes()


def decode_gdim(data: bytes) -> np.ndarray:
    r = _Reader(data, "GDIM")
    r.magic(b"GDIM")
    w, h = r.unpack("II")
    img = r.array(np.uint8, w * h).reshape(h, w)
    r.finish()
    return img


def write_gdim(path, image: np.ndarray) -> None:
    _write_bytes(path, encode_gdim(image))


def read_gdim(path) -> np.ndarray:
    return decode_gdim(Path(path).read_bytes())


# --- GEOREC -----------------------------------------------------------------

def encode_georec(scene: SceneReconstruction, image_paths: Optional[Dict[int, str]] = None) -> str:
    """Text serialisation; ``image_paths`` adds ``IMG cam path`` lines for raster sidecars."""
    lines = [GEOREC_HEADER]
    for c in scene.cameras:
        vals = [c.focal, *c.principal_point]
        lines.append(" ".join(["CAM", str(c.id), *map(_fmt, vals), str(c.width), str(c.height),
                               *map(_fmt, c.rotation.ravel()), *map(_fmt, c.center)]))
    for t in scene.tracks:
        lines.append(" ".join(["TRK", str(t.id), *map(_fmt, t.position), *map(_fmt, t.normal)]))
    for t in scene.tracks:
        for cam, kp in t.observations:
            lines.append(" ".join(["OBS", str(t.id), str(cam), *map(_fmt, kp.as_array())]))
    for cam, path in sorted((image_paths or {}).items()):
        lines.append(f"IMG {cam} {path}")
    return "\n".join(lines) + "\n"


_FIELD_COUNTS = {"CAM": 19, "TRK": 8, "OBS": 7, "IMG": 3}


def decode_georec(text: str):
    """Parse GEOREC text into (cameras, tracks, image_paths) without building the scene.

    Syntax errors raise CorruptFile at the byte offset of the offending line;
    references to undeclared cameras or tracks raise ValidationError naming the id.
    """
    cams: List[Camera] = []
    trk_geom: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    obs: Dict[int, List[Tuple[int, Keypoint]]] = {}
    images: Dict[int, str] = {}
    offset = 0
    seen_header = False
    for raw in text.splitlines(keepends=True):
        start = offset
        offset += len(raw.encode("utf-8"))
        line = raw.strip()
        if not line:
            continue
        if not seen_header:
            if line != GEOREC_HEADER:
                raise CorruptFile(start, f"GEOREC: bad header {line!r}")
            seen_header = True
            continue
        parts = line.split(maxsplit=2) if line.startswith("IMG ") else line.split()
        kind = parts[0]
        if kind not in _FIELD_COUNTS or len(parts) != _FIELD_COUNTS[kind]:
            raise CorruptFile(start, f"GEOREC: malformed line {line[:60]!r}")
        try:
            if kind == "CAM":
                v = [float(x) for x in parts[2:]]
                cams.append(Camera(int(parts[1]), v[14:17], np.reshape(v[5:14], (3, 3)), v[0],
                                   v[1:3], (int(parts[5]), int(parts[6]))))
            elif kind == "TRK":
                tid = int(parts[1])
                if tid in trk_geom:
                    raise ValidationError(f"duplicate track id {tid}")
                v = [float(x) for x in parts[2:]]
                trk_geom[tid] = (np.array(v[:3]), np.array(v[3:]))
            elif kind == "OBS":
                v = [float(x) for x in parts[3:]]
                obs.setdefault(int(parts[1]), []).append((int(parts[2]), Keypoint(*v)))
            else:
                images[int(parts[1])] = parts[2]
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise CorruptFile(start, f"GEOREC: unparsable number in {line[:60]!r}") from exc
    if not seen_header:
        raise CorruptFile(0, "GEOREC: missing header")
    cam_ids = {c.id for c in cams}
    for tid, lst in obs.items():
        if tid not in trk_geom:
            raise ValidationError(f"OBS references unknown track id {tid}")
        for cam, _ in lst:
            if cam not in cam_ids:
                raise ValidationError(f"OBS of track {tid} references unknown camera id {cam}")
    for cam in images:
        if cam not in cam_ids:
            raise ValidationError(f"IMG references unknown camera id {cam}")
    tracks = [Track(tid, p, n, tuple(obs.get(tid, ()))) for tid, (p, n) in trk_geom.items()]
    return cams, tracks, images


def write_scene(path, scene: SceneReconstruction) -> None:
    """Write ``path`` (GEOREC) plus one ``<stem>.cam<id>.gdim`` sidecar per image."""
    path = Path(path)
    names = {}
    for cam, img in sorted(scene.images.items()):
        name = f"{path.stem}.cam{cam}.gdim"
        write_gdim(path.parent / name, img)
        names[cam] = name
    _write_bytes(path, encode_georec(scene, names).encode("utf-8"))


def read_scene(path, load_images: bool = True) -> SceneReconstruction:
    path = Path(path)
    cams, tracks, images = decode_georec(path.read_bytes().decode("utf-8"))
    rasters = {}
    if load_images:
        for cam, rel in images.items():
            rasters[cam] = read_gdim(path.parent / rel)
    return SceneReconstruction(tuple(cams), tuple(tracks), rasters)


# --- GDPK -------------------------------------------------------------------

@dataclass(frozen=True)
class PatchDataset:
    """Raw patch pairs: ``patches[n] = (patch_a, patch_b)`` from match set ``match_set_ids[n]``."""

    g_size: int
    match_set_ids: np.ndarray  # (n,) uint32
    s_patch: np.ndarray  # (n,) float32
    patches: np.ndarray  # (n, 2, G, G) float32

    def __post_init__(self):
        n = len(self.match_set_ids)
        if self.patches.shape != (n, 2, self.g_size, self.g_size) or len(self.s_patch) != n:
            raise ValidationError("patch dataset arrays disagree in shape")

    def __len__(self):
        return len(self.match_set_ids)


def encode_gdpk(ds: PatchDataset) -> bytes:
    n, g = len(ds), ds.g_size
    rec = np.dtype([("id", "<u4"), ("s", "<f4"), ("px", "<f4", (2 * g * g,))])
    body = np.empty(n, dtype=rec)
    body["id"] = ds.match_set_ids
    body["s"] = ds.s_patch
    body["px"] = np.asarray(ds.patches, dtype=np.float32).reshape(n, -1)
    return b"GDPK" + struct.pack("<IIQ", GDPK_VERSION, g, n) + body.tobytes()


def decode_gdpk(data: bytes) -> PatchDataset:
    r = _Reader(data, "GDPK")
    r.magic(b"GDPK")
    version = r.unpack("I")
    if version != GDPK_VERSION:
        raise CorruptFile(4, f"GDPK: unsupported version {version}")
    g, n = r.unpack("IQ")
    ids = np.empty(n, np.uint32)
    sp = np.empty(n, np.float32)
    px = np.empty((n, 2, g, g), np.float32)
    for i in range(n):
        ids[i] = r.unpack("I")
        sp[i] = r.array(np.float32, 1)[0]
        px[i] = r.array(np.float32, 2 * g * g).reshape(2, g, g)
    r.finish()
    return PatchDataset(g, ids, sp, px)


def write_gdpk(path, ds: PatchDataset) -> None:
    _write_bytes(path, encode_gdpk(ds))


def read_gdpk(path) -> PatchDataset:
    return decode_gdpk(Path(path).read_bytes())


MANIFEST_HEADER = "match_set_id\tcam_i\tcam_j\tepoch\tchunk"


def encode_manifest(rows: Sequence[Tuple[int, int, int, int, int]]) -> str:
    return "\n".join([MANIFEST_HEADER] + ["\t".join(str(int(v)) for v in r) for r in rows]) + "\n"


def decode_manifest(text: str) -> List[Tuple[int, ...]]:
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise CorruptFile(0, "manifest: bad header")
    out = []
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        parts = line.split("\t")
        if len(parts) != 5:
            raise CorruptFile(offset, f"manifest: malformed line {line!r}")
        try:
            out.append(tuple(int(p) for p in parts))
        except ValueError as exc:
            raise CorruptFile(offset, f"manifest: malformed line {line!r}") from exc
        offset += len(line) + 1
    return out


# --- GDNW -------------------------------------------------------------------

def encode_gdnw(params: NetParams) -> bytes:
    out = [b"GDNW", struct.pack("<III", GDNW_VERSION, params.in_size, len(params.arch))]
    for spec, w, m, v in zip(params.arch, params.weights, params.running_mean, params.running_var):
        out.append(struct.pack("<6I", spec.kernel, w.shape[2], spec.out_ch, spec.stride,
                               0 if spec.padding == "same" else 1, int(spec.norm)))
        out.append(np.asarray(w, dtype="<f4").tobytes())
        if spec.norm:
            out.append(np.asarray(m, dtype="<f4").tobytes())
            out.append(np.asarray(v, dtype="<f4").tobytes())
    return b"".join(out)


def decode_gdnw(data: bytes) -> NetParams:
    r = _Reader(data, "GDNW")
    r.magic(b"GDNW")
    version = r.unpack("I")
    if version != GDNW_VERSION:
        raise CorruptFile(4, f"GDNW: unsupported version {version}")
    in_size, n_layers = r.unpack("II")
    arch, weights, means, vars_ = [], [], [], []
    for _ in range(n_layers):
        start = r.pos
        k, cin, cout, stride, pad, norm = r.unpack("6I")
        if pad not in (0, 1) or norm not in (0, 1) or k == 0 or stride == 0:
            raise CorruptFile(start, "GDNW: invalid layer header")
        arch.append(ConvSpec(k, cout, stride, "same" if pad == 0 else "valid", bool(norm)))
        weights.append(r.array(np.float32, k * k * cin * cout).reshape(k, k, cin, cout))
        means.append(r.array(np.float32, cout) if norm else None)
        vars_.append(r.array(np.float32, cout) if norm else None)
    r.finish()
    return NetParams(tuple(arch), in_size, weights, means, vars_)


def write_gdnw(path, params: NetParams) -> None:
    _write_bytes(path, encode_gdnw(params))


def read_gdnw(path) -> NetParams:
    return decode_gdnw(Path(path).read_bytes())


# --- GDSC -------------------------------------------------------------------

_DTYPES = {0: np.float32, 1: np.uint8}


def encode_gdsc(ds: DescriptorSet) -> bytes:
    code = 1 if ds.quantized else 0
    n, dim = ds.vectors.shape if len(ds) else (0, ds.vectors.shape[-1] if ds.vectors.ndim == 2 else 0)
    rec = np.dtype([("kp", "<f4", (4,)), ("v", "<f4" if code == 0 else "u1", (dim,))])
    body = np.empty(n, dtype=rec)
    body["kp"] = ds.keypoints
    body["v"] = ds.vectors
    return b"GDSC" + struct.pack("<IBIQ", GDSC_VERSION, code, dim, n) + body.tobytes()


def decode_gdsc(data: bytes, image_id: int = -1) -> DescriptorSet:
    r = _Reader(data, "GDSC")
    r.magic(b"GDSC")
    version = r.unpack("I")
    if version != GDSC_VERSION:
        raise CorruptFile(4, f"GDSC: unsupported version {version}")
    code = r.unpack("B")
    if code not in _DTYPES:
        raise CorruptFile(8, f"GDSC: unknown dtype code {code}")
    dim, n = r.unpack("IQ")
    rec = np.dtype([("kp", "<f4", (4,)), ("v", "<f4" if code == 0 else "u1", (dim,))])
    body = np.frombuffer(r.take(rec.itemsize * n), dtype=rec)
    r.finish()
    vectors = np.ascontiguousarray(body["v"]).astype(_DTYPES[code]).reshape(n, dim)
    # keypoints are stored as f32; keep them f32-exact so re-encoding is bit-identical
    kps = np.ascontiguousarray(body["kp"]).astype(np.float32).reshape(n, 4)
    return DescriptorSet(image_id, kps, vectors)


def write_gdsc(path, ds: DescriptorSet) -> None:
    _write_bytes(path, encode_gdsc(ds))


def read_gdsc(path, image_id: int = -1) -> DescriptorSet:
    return decode_gdsc(Path(path).read_bytes(), image_id)
