"""Scene and frame file I/O: binary PLY scenes, PNG/PFM rasters, cameras.json."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .scene import Camera, Frame, MaterialParams, Scene, SceneValidationError

PLY_PROPERTIES = [
    "x", "y", "z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "scale_x", "scale_y", "scale_z",
    "red", "green", "blue",
    "opacity",
]

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4",
}


class SceneFormatError(ValueError):
    """Malformed scene file; carries the offending record index when known."""

    def __init__(self, message: str, record: int | None = None):
        super().__init__(message)
        self.record = record


class FrameDirectoryError(ValueError):
    """Frame directory is incomplete or inconsistent."""


# ---------------------------------------------------------------------------
# scene PLY

def save_scene(scene: Scene, path) -> None:
    """Write a scene as binary little-endian PLY (one vertex per Gaussian).

    Scales are stored as natural logs and opacity as a logit, which is the
    scene's native representation, so save/load round-trips bit-exactly.
    """
    path = Path(path)
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("property uchar is_padded")
    header.append("end_header")

    rec = np.empty(n, dtype=[(name, "<f4") for name in PLY_PROPERTIES] + [("is_padded", "u1")])
    rec["x"], rec["y"], rec["z"] = scene.positions.T
    rec["rot_w"], rec["rot_x"], rec["rot_y"], rec["rot_z"] = scene.rotations.T
    rec["scale_x"], rec["scale_y"], rec["scale_z"] = scene.log_scales.T
    rec["red"], rec["green"], rec["blue"] = scene.colors.T
    rec["opacity"] = scene.opacity_logits
    rec["is_padded"] = scene.is_padded.astype(np.uint8)

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def load_scene(path, material: MaterialParams | None = None) -> Scene:
    """Read a scene PLY written by :func:`save_scene` (extra properties ignored)."""
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise SceneFormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    if not any(line.strip() == "format binary_little_endian 1.0" for line in header):
        raise SceneFormatError(f"{path}: expected binary little-endian PLY")
    count = None
    fields: list[tuple[str, str]] = []
    in_vertex = False
    for line in header:
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise SceneFormatError(f"{path}: list properties are not supported")
            if tok[1] not in _PLY_TYPES:
                raise SceneFormatError(f"{path}: unsupported property type {tok[1]!r}")
            fields.append((tok[2], _PLY_TYPES[tok[1]]))
    if count is None:
        raise SceneFormatError(f"{path}: missing vertex element")
    names = [f[0] for f in fields]
    missing = [p for p in PLY_PROPERTIES if p not in names]
    if missing:
        raise SceneFormatError(f"{path}: missing properties {missing}")

    dtype = np.dtype(fields)
    if len(body) < count * dtype.itemsize:
        raise SceneFormatError(f"{path}: truncated body ({len(body)} bytes for {count} records)")
    rec = np.frombuffer(body[:count * dtype.itemsize], dtype=dtype)

    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float32)
    bad = ~np.all(np.isfinite(positions), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise SceneFormatError(f"{path}: record {i}: non-finite position", record=i)
    rotations = np.stack([rec["rot_w"], rec["rot_x"], rec["rot_y"], rec["rot_z"]], axis=1)
    norms = np.linalg.norm(rotations.astype(np.float64), axis=1)
    bad = ~np.isfinite(norms) | (norms < 1e-12)
    if bad.any():
        i = int(np.argmax(bad))
        raise SceneFormatError(f"{path}: record {i}: degenerate rotation quaternion", record=i)
    log_scales = np.stack([rec["scale_x"], rec["scale_y"], rec["scale_z"]], axis=1)
    bad = ~np.all(np.isfinite(log_scales), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise SceneFormatError(f"{path}: record {i}: non-finite log scale", record=i)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    opacity = np.asarray(rec["opacity"])
    if np.isnan(opacity).any():
        i = int(np.argmax(np.isnan(opacity)))
        raise SceneFormatError(f"{path}: record {i}: NaN opacity", record=i)
    padded = rec["is_padded"].astype(bool) if "is_padded" in names else None

    return Scene(positions, rotations.astype(np.float32), log_scales.astype(np.float32),
                 colors.astype(np.float32), opacity.astype(np.float32), padded,
                 material=material)


# ---------------------------------------------------------------------------
# rasters

def write_png(path, image: np.ndarray) -> None:
    """float [0,1] (H,W) or (H,W,3) -> 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(Path(path))


def read_png(path) -> np.ndarray:
    """8-bit PNG -> float32 in [0,1]; RGB kept as (H,W,3), grayscale as (H,W)."""
    img = Image.open(Path(path))
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel float32 PFM, little-endian, rows bottom-up."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a single-channel 2D array")
    with open(Path(path), "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dt).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def _read_depth(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() == ".exr":
        try:
            import os
            os.environ.setdefault("OPENCV_IO_ENABLE_OPENEXR", "1")
            import cv2
        except ImportError as e:  # pragma: no cover
            raise FrameDirectoryError(f"{path}: EXR depth requires OpenCV") from e
        img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise FrameDirectoryError(f"{path}: failed to decode EXR")
        if img.ndim == 3:
            img = img[..., 0]
        return img.astype(np.float32)
    raise FrameDirectoryError(f"{path}: unsupported depth format")


# ---------------------------------------------------------------------------
# frame directories

def _camera_from_dict(d: dict) -> Camera:
    return Camera(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                  width=int(d["width"]), height=int(d["height"]),
                  world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64))


def camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "world_to_camera": cam.world_to_camera.tolist()}


def load_cameras(path) -> list[Camera]:
    doc = json.loads(Path(path).read_text())
    if "cameras" not in doc or not isinstance(doc["cameras"], list):
        raise FrameDirectoryError(f"{path}: expected a top-level 'cameras' list")
    return [_camera_from_dict(d) for d in doc["cameras"]]


def save_cameras(path, cameras: Sequence[Camera]) -> None:
    Path(path).write_text(json.dumps(
        {"cameras": [camera_to_dict(c) for c in cameras]}, indent=1))


def load_frames(directory) -> list[Frame]:
    """Load frame_%05d.png / depth_%05d.{pfm,exr} / mask_%05d.png + cameras.json.

    Frames are ordered by index; raster resolutions are validated against the
    per-frame camera, and depth must be positive wherever the mask is clear.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameDirectoryError(f"{directory}: not a directory")
    indices = sorted(
        int(m.group(1)) for p in directory.glob("frame_*.png")
        if (m := re.fullmatch(r"frame_(\d{5})\.png", p.name))
    )
    if not indices:
        raise FrameDirectoryError(f"{directory}: no frame_%05d.png images found")

    missing: list[str] = []
    depth_paths: dict[int, Path] = {}
    for k in indices:
        for ext in (".pfm", ".exr"):
            cand = directory / f"depth_{k:05d}{ext}"
            if cand.exists():
                depth_paths[k] = cand
                break
        else:
            missing.append(f"depth_{k:05d}.pfm")
        if not (directory / f"mask_{k:05d}.png").exists():
            missing.append(f"mask_{k:05d}.png")
    cam_path = directory / "cameras.json"
    if not cam_path.exists():
        missing.append("cameras.json")
    if missing:
        raise FrameDirectoryError(f"{directory}: missing files: {', '.join(missing)}")

    cameras = load_cameras(cam_path)
    if len(cameras) != len(indices):
        raise FrameDirectoryError(
            f"{directory}: cameras.json has {len(cameras)} entries for {len(indices)} frames")

    frames = []
    for cam, k in zip(cameras, indices):
        image = read_png(directory / f"frame_{k:05d}.png")
        if image.ndim != 3:
            image = np.repeat(image[..., None], 3, axis=2)
        depth = _read_depth(depth_paths[k])
        mask = read_png(directory / f"mask_{k:05d}.png")
        if mask.ndim == 3:
            mask = mask.max(axis=2)
        try:
            frames.append(Frame(image=image, depth=depth, mask=mask > 0, camera=cam))
        except SceneValidationError as e:
            raise FrameDirectoryError(f"{directory}: frame {k}: {e}") from e
    return frames


def save_frames(directory, frames: Sequence[Frame]) -> None:
    """Inverse of :func:`load_frames`; used by the synthetic fixture generator."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, fr in enumerate(frames):
        write_png(directory / f"frame_{k:05d}.png", fr.image)
        write_pfm(directory / f"depth_{k:05d}.pfm", fr.depth)
        write_png(directory / f"mask_{k:05d}.png", fr.mask.astype(np.uint8) * 255)
    save_cameras(directory / "cameras.json", [fr.camera for fr in frames])
