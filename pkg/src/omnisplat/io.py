"""Scene ingestion and persistence.

Point clouds and checkpoints are PLY files (ascii or binary little endian).
Checkpoints use the usual Gaussian-splat property names (x, y, z, f_dc_0..2,
opacity, scale_0..2, rot_0..3) so external viewers can open them; they
additionally carry rgb_0..2 so colors round-trip exactly.

Manifest grammar, one record per line, ``#`` starts a comment::

    pointcloud <path>
    image <path> <width> <height> <r11 r12 r13 r21 r22 r23 r31 r32 r33> <t1 t2 t3> [train|test]

The pose is world-to-camera (x_cam = R x_world + t); relative paths are
resolved against the manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from omnisplat.core import CameraPose, GaussianCloud, logit

SH_C0 = 0.28209479177387814
CHECKPOINT_VERSION = 1
_VERSION_TAG = "omnisplat_checkpoint_version"

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


@dataclass
class PlyData:
    vertices: np.ndarray
    comments: list = field(default_factory=list)


def read_ply(path) -> PlyData:
    """Read the vertex element of a PLY file into a structured array."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyError(f"{path}: not a PLY file (no header at byte offset 0)")
    body = raw.index(b"\n", end) + 1
    fmt = None
    elements = []
    comments = []
    offset = 0
    for line in raw[:body].split(b"\n"):
        toks = line.decode("ascii", "replace").split()
        pos = offset
        offset += len(line) + 1
        if not toks:
            continue
        if toks[0] == "format":
            fmt = toks[1]
        elif toks[0] == "comment":
            comments.append(" ".join(toks[1:]))
        elif toks[0] == "element":
            elements.append((toks[1], int(toks[2]), []))
        elif toks[0] == "property":
            if not elements:
                raise PlyError(f"{path}: property before any element at byte offset {pos}")
            if toks[1] == "list":
                raise PlyError(f"{path}: list property {toks[-1]!r} unsupported at byte offset {pos}")
            if toks[1] not in _PLY_TYPES:
                raise PlyError(f"{path}: unknown property type {toks[1]!r} at byte offset {pos}")
            elements[-1][2].append((toks[2], _PLY_TYPES[toks[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"{path}: unsupported format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise PlyError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    if fmt == "ascii":
        dtype = np.dtype([(n, t) for n, t in props])
        lines = raw[body:].split(b"\n")
        out = np.zeros(count, dtype)
        pos = body
        for i in range(count):
            if i >= len(lines) or not lines[i].strip():
                raise PlyError(f"{path}: truncated ascii data, vertex {i} missing at byte offset {pos}")
            vals = lines[i].split()
            if len(vals) < len(props):
                raise PlyError(f"{path}: vertex {i} has {len(vals)} values, expected {len(props)}, at byte offset {pos}")
            out[i] = tuple(float(v) for v in vals[: len(props)])
            pos += len(lines[i]) + 1
        return PlyData(out, comments)
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    need = count * dtype.itemsize
    if len(raw) - body < need:
        got = (len(raw) - body) // dtype.itemsize
        raise PlyError(f"{path}: truncated binary data, vertex {got} incomplete at byte offset {body + got * dtype.itemsize}")
    return PlyData(np.frombuffer(raw, dtype, count, body).copy(), comments)


def write_ply(path, vertices: np.ndarray, binary=True, comments=()):
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0"]
    header += ["comment " + c for c in comments]
    header.append(f"element vertex {len(vertices)}")
    for name in vertices.dtype.names:
        header.append(f"property {_PLY_NAMES[vertices.dtype[name].str[1:]]} {name}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            # repack: a multi-field view carries padding for the dropped fields
            packed = np.dtype([(n, "<" + vertices.dtype[n].str[1:]) for n in vertices.dtype.names])
            f.write(vertices.astype(packed).tobytes())
        else:
            for row in vertices:
                f.write((" ".join(repr(v.item()) for v in row) + "\n").encode("ascii"))


def load_pointcloud(path):
    """Positions (N, 3) and RGB colors in [0, 1] from an SfM point file."""
    v = read_ply(path).vertices
    missing = [p for p in ("x", "y", "z", "red", "green", "blue") if p not in v.dtype.names]
    if missing:
        raise PlyError(f"{path}: missing vertex properties {missing}")
    if len(v) == 0:
        raise PlyError(f"{path}: point cloud is empty")
    xyz = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    rgb = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64)
    if v.dtype["red"].kind in "ui":
        rgb /= 255.0
    return xyz, rgb


def save_pointcloud(path, xyz, rgb, binary=True):
    v = np.zeros(len(xyz), [("x", "f4"), ("y", "f4"), ("z", "f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    v["x"], v["y"], v["z"] = np.asarray(xyz, np.float32).T
    v["red"], v["green"], v["blue"] = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8).T
    write_ply(path, v, binary=binary)


def cloud_from_points(xyz, rgb, dtype=np.float32, initial_opacity=0.1) -> GaussianCloud:
    """Isotropic Gaussians at the points, sized by their 3 nearest neighbors.

    The scale is the mean distance to the (up to) three nearest other
    points; a lone point gets 0.01.
    """
    xyz = np.asarray(xyz, np.float64)
    n = len(xyz)
    k = min(3, n - 1)
    if k > 0:
        dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
        scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    else:
        scale = np.full(n, 0.01)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        means=xyz,
        rotations=rot,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        raw_opacities=np.full(n, logit(initial_opacity)),
        colors=np.clip(np.asarray(rgb, np.float64), 0.0, 1.0),
    ).astype(dtype)


def save_checkpoint(cloud: GaussianCloud, path, binary=True):
    """Write ``cloud`` as a Gaussian-splat PLY in its own float precision."""
    f = cloud.dtype.str[1:]
    names = (
        ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
        + [f"scale_{i}" for i in range(3)]
        + [f"rot_{i}" for i in range(4)]
        + [f"rgb_{i}" for i in range(3)]
    )
    v = np.zeros(len(cloud), [(n, f) for n in names])
    for i, axis in enumerate("xyz"):
        v[axis] = cloud.means[:, i]
    fdc = (cloud.colors.astype(np.float64) - 0.5) / SH_C0
    for i in range(3):
        v[f"f_dc_{i}"] = fdc[:, i]
        v[f"scale_{i}"] = cloud.log_scales[:, i]
        v[f"rgb_{i}"] = cloud.colors[:, i]
    for i in range(4):
        v[f"rot_{i}"] = cloud.rotations[:, i]
    v["opacity"] = cloud.raw_opacities
    write_ply(path, v, binary=binary, comments=[f"{_VERSION_TAG} {CHECKPOINT_VERSION}"])


def load_checkpoint(path, dtype=None) -> GaussianCloud:
    """Read a checkpoint; files from other tools load via their f_dc colors."""
    ply = read_ply(path)
    for c in ply.comments:
        if c.startswith(_VERSION_TAG):
            version = int(c.split()[1])
            if version > CHECKPOINT_VERSION:
                raise CheckpointVersionError(
                    f"{path}: checkpoint version {version} is newer than supported version {CHECKPOINT_VERSION}"
                )
    v = ply.vertices
    required = ["x", "y", "z", "opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    missing = [p for p in required if p not in v.dtype.names]
    if missing:
        raise PlyError(f"{path}: missing checkpoint properties {missing}")
    if dtype is None:
        dtype = v.dtype["x"]
    if all(f"rgb_{i}" in v.dtype.names for i in range(3)):
        colors = np.stack([v[f"rgb_{i}"] for i in range(3)], 1)
    elif all(f"f_dc_{i}" in v.dtype.names for i in range(3)):
        colors = 0.5 + SH_C0 * np.stack([v[f"f_dc_{i}"] for i in range(3)], 1).astype(np.float64)
    else:
        raise PlyError(f"{path}: checkpoint has no color properties")
    return GaussianCloud(
        means=np.stack([v["x"], v["y"], v["z"]], 1).astype(dtype),
        rotations=np.stack([v[f"rot_{i}"] for i in range(4)], 1).astype(dtype),
        log_scales=np.stack([v[f"scale_{i}"] for i in range(3)], 1).astype(dtype),
        raw_opacities=np.asarray(v["opacity"], dtype),
        colors=colors.astype(dtype),
    )


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG as float32 in [0, 1], no gamma conversion."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, pixels):
    arr = np.clip(np.round(np.asarray(pixels, np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


@dataclass
class ManifestEntry:
    image_path: Path
    camera: CameraPose
    split: str = "train"


@dataclass
class SceneManifest:
    entries: list
    pointcloud_path: Path | None = None

    def split(self, name: str | None) -> list:
        if name in (None, "all"):
            return list(self.entries)
        return [e for e in self.entries if e.split == name]


def orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def parse_pose(values, width, height, where="pose"):
    """CameraPose from 12 numbers: row-major rotation then translation."""
    if len(values) != 12:
        raise ManifestError(f"{where}: expected 12 pose numbers, got {len(values)}")
    try:
        nums = np.array([float(x) for x in values])
    except ValueError as exc:
        raise ManifestError(f"{where}: {exc}") from None
    if not np.all(np.isfinite(nums)):
        raise ManifestError(f"{where}: non-finite pose value")
    R = nums[:9].reshape(3, 3)
    err = np.linalg.norm(R.T @ R - np.eye(3))
    if err >= 1e-3:
        raise ManifestError(f"{where}: rotation is not orthonormal (|R^T R - I| = {err:.3g})")
    if err >= 1e-6 or np.linalg.det(R) < 0:
        R = orthonormalize(R)
    try:
        return CameraPose(R, nums[9:], width, height)
    except ValueError as exc:
        raise ManifestError(f"{where}: {exc}") from None


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    text = path.read_text()
    root = path.parent
    entries = []
    cloud = None
    dims = None
    for lineno, line in enumerate(text.splitlines(), 1):
        toks = line.split("#", 1)[0].split()
        if not toks:
            continue
        where = f"{path}:{lineno}"
        if toks[0] == "pointcloud":
            if len(toks) != 2:
                raise ManifestError(f"{where}: expected 'pointcloud <path>'")
            cloud = root / toks[1]
            if not cloud.exists():
                raise ManifestError(f"{where}: point cloud {cloud} does not exist")
        elif toks[0] == "image":
            if len(toks) not in (16, 17):
                raise ManifestError(f"{where}: expected 'image <path> <W> <H> <12 pose numbers> [split]'")
            img = root / toks[1]
            if not img.exists():
                raise ManifestError(f"{where}: image {img} does not exist")
            try:
                w, h = int(toks[2]), int(toks[3])
            except ValueError:
                raise ManifestError(f"{where}: image size must be integers") from None
            if dims is not None and (w, h) != dims:
                raise ManifestError(f"{where}: image size {w}x{h} differs from {dims[0]}x{dims[1]}")
            dims = (w, h)
            split = toks[16] if len(toks) == 17 else "train"
            if split not in ("train", "test"):
                raise ManifestError(f"{where}: split must be 'train' or 'test', got {split!r}")
            entries.append(ManifestEntry(img, parse_pose(toks[4:16], w, h, where), split))
        else:
            raise ManifestError(f"{where}: unknown record {toks[0]!r}")
    return SceneManifest(entries, cloud)


def format_pose(camera: CameraPose) -> str:
    nums = list(camera.rotation.reshape(-1)) + list(camera.translation)
    return " ".join(repr(float(x)) for x in nums)


def write_manifest(path, manifest: SceneManifest):
    path = Path(path)
    lines = ["# omnisplat scene manifest"]
    if manifest.pointcloud_path is not None:
        lines.append(f"pointcloud {Path(manifest.pointcloud_path).relative_to(path.parent)}")
    for e in manifest.entries:
        rel = Path(e.image_path).relative_to(path.parent)
        lines.append(f"image {rel} {e.camera.width} {e.camera.height} {format_pose(e.camera)} {e.split}")
    path.write_text("\n".join(lines) + "\n")

