"""File formats: point clouds, model containers, images and view manifests.

Point clouds are ASCII XYZ with optional columns, selected by count:

====== =========================================
cols   meaning
====== =========================================
3      x y z
4      x y z sigma
6      x y z r g b            (colour in [0, 1])
7      x y z r g b sigma
9      x y z r g b sx sy sz   (per-axis sigma)
====== =========================================

Lines starting with ``#`` are comments.  ASCII PLY is accepted on import.

Models are stored as JSON holding the training points, kernel and noise
settings, the fitted noise diagonal and any feature or label tables.
Loading refactorizes from those, so a round trip reproduces queries to
rounding error.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .field import GpdfModel, NoiseModel, _assemble
from .kernels import KernelConfig, kernel_matrix
from .render import CameraModel

MODEL_FORMAT = "gpdf-model"
MODEL_VERSION = 1


class SchemaError(ValueError):
    """Input file parsed but does not match the expected layout."""


# ----------------------------------------------------------------------------
# point clouds


def read_cloud(path):
    """Read an XYZ or PLY file; returns ``(X, colors, sigma)``.

    ``colors`` and ``sigma`` are None when absent; ``sigma`` is ``n`` or
    ``n x 3``.
    """
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    if first.strip() == "ply":
        return _read_ply(path)
    try:
        data = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    if data.size == 0:
        raise SchemaError(f"{path}: no points")
    c = data.shape[1]
    if c not in (3, 4, 6, 7, 9):
        raise SchemaError(f"{path}: unsupported column count {c}")
    X = data[:, :3]
    colors = data[:, 3:6] if c >= 6 else None
    sigma = None
    if c in (4, 7):
        sigma = data[:, c - 1]
    elif c == 9:
        sigma = data[:, 6:9]
    _check_cloud(path, X, colors, sigma)
    return X, colors, sigma


def _check_cloud(path, X, colors, sigma):
    if not np.all(np.isfinite(X)):
        raise SchemaError(f"{path}: non-finite coordinates")
    if colors is not None and (np.any(colors < 0) or np.any(colors > 1)):
        raise SchemaError(f"{path}: colours must lie in [0, 1]")
    if sigma is not None and np.any(~(sigma >= 0)):
        raise SchemaError(f"{path}: sigma must be non-negative")


def _read_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    props, n_vert, fmt = [], None, None
    in_vertex = False
    body = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vert = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append((tok[-1], tok[1]))
        elif tok[0] == "end_header":
            body = i + 1
            break
    if fmt != "ascii":
        raise SchemaError(f"{path}: only ASCII PLY is supported")
    if n_vert is None or body is None:
        raise SchemaError(f"{path}: malformed PLY header")
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise SchemaError(f"{path}: PLY vertices need x, y, z")
    rows = [lines[body + k].split()[: len(names)] for k in range(n_vert)]
    data = np.array(rows, dtype=float).reshape(n_vert, len(names))
    col = {nm: data[:, k] for k, nm in enumerate(names)}
    X = np.c_[col["x"], col["y"], col["z"]]
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.c_[col["red"], col["green"], col["blue"]]
        kinds = dict(props)
        if kinds["red"] in ("uchar", "uint8"):
            colors = colors / 255.0
    sigma = col.get("sigma")
    _check_cloud(path, X, colors, sigma)
    return X, colors, sigma


def write_cloud(path, X, colors=None, sigma=None):
    """Write an XYZ file in the column layout documented above."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = [X]
    if colors is not None:
        cols.append(np.asarray(colors, dtype=float).reshape(len(X), 3))
    if sigma is not None:
        s = np.asarray(sigma, dtype=float)
        if colors is None and s.ndim == 2:
            raise SchemaError("per-axis sigma needs colour columns")
        cols.append(s.reshape(len(X), -1))
    np.savetxt(path, np.hstack(cols), fmt="%.17g")


# ----------------------------------------------------------------------------
# models


def _arr(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def model_to_dict(model: GpdfModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kernel": model.kernel.to_dict(),
        "noise": model.noise.to_dict(),
        "X": _arr(model.X),
        "D_diag": _arr(model.D_diag),
        "features": _arr(model.feature_table),
        "labels": _arr(model.label_table),
        "point_var": _arr(model.point_var),
    }


def model_from_dict(data: dict) -> GpdfModel:
    if data.get("format") != MODEL_FORMAT:
        raise SchemaError("not a model file")
    if data.get("version") != MODEL_VERSION:
        raise SchemaError(f"unsupported model version {data.get('version')}")
    try:
        kernel = KernelConfig.from_dict(data["kernel"])
        noise = NoiseModel.from_dict(data["noise"])
        X = np.asarray(data["X"], dtype=float)
        Dd = np.asarray(data["D_diag"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model: {exc}") from None
    if X.ndim != 2 or Dd.shape != (len(X),):
        raise SchemaError("model arrays have inconsistent shapes")
    opt = {k: (None if data.get(k) is None else np.asarray(data[k], dtype=float))
           for k in ("features", "labels", "point_var")}
    K = kernel_matrix(X, X, kernel)
    return _assemble(X, kernel, noise, K, Dd, opt["features"], opt["labels"], opt["point_var"])


def save_model(path, model: GpdfModel):
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> GpdfModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return model_from_dict(data)


# ----------------------------------------------------------------------------
# images


def write_ppm(path, rgb):
    """8-bit binary colour image; values in [0, 1] are clipped and rounded."""
    a = np.asarray(rgb, dtype=float)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("expected an H x W x 3 array")
    h, w, _ = a.shape
    data = np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _header_tokens(fh, count):
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise SchemaError("truncated image header")
        line = line.split(b"#")[0]
        tokens.extend(line.split())
    return tokens


def read_ppm(path):
    with open(path, "rb") as fh:
        magic, w, h, maxval = _header_tokens(fh, 4)
        if magic != b"P6" or int(maxval) != 255:
            raise SchemaError(f"{path}: only 8-bit P6 images are supported")
        w, h = int(w), int(h)
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise SchemaError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(float) / 255.0


def write_pfm(path, image):
    """32-bit float map; one channel for 2-D input, three for H x W x 3.

    Rows are stored bottom-to-top as the format requires; little-endian.
    """
    a = np.asarray(image, dtype=np.float32)
    if a.ndim == 2:
        magic = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = "PF"
    else:
        raise ValueError("expected H x W or H x W x 3")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        magic, w, h, scale = _header_tokens(fh, 4)
        if magic not in (b"Pf", b"PF"):
            raise SchemaError(f"{path}: not a PFM file")
        w, h, scale = int(w), int(h), float(scale)
        ch = 1 if magic == b"Pf" else 3
        raw = fh.read(w * h * ch * 4)
    if len(raw) != w * h * ch * 4:
        raise SchemaError(f"{path}: truncated pixel data")
    dt = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(raw, dtype=dt).astype(float)
    a = a.reshape(h, w) if ch == 1 else a.reshape(h, w, 3)
    return a[::-1].copy()


# ----------------------------------------------------------------------------
# view manifests


def read_manifest(path):
    """Load ``{"views": [{intrinsics, pose, color?, depth?}, ...]}``.

    Returns a list of ``(camera, color_path, depth_path)``; image paths are
    resolved against the manifest directory and may be None.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    views = data.get("views") if isinstance(data, dict) else None
    if not isinstance(views, list):
        raise SchemaError(f"{path}: manifest needs a 'views' list")
    out = []
    for k, v in enumerate(views):
        unknown = set(v) - {"intrinsics", "pose", "color", "depth"}
        if unknown:
            raise SchemaError(f"{path}: view {k} has unknown keys {sorted(unknown)}")
        try:
            cam = CameraModel.from_dict(v)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: view {k}: {exc}") from None
        resolve = (lambda p: None if p is None else path.parent / p)
        out.append((cam, resolve(v.get("color")), resolve(v.get("depth"))))
    return out


def write_manifest(path, cameras, color_paths=None, depth_paths=None):
    views = []
    for k, cam in enumerate(cameras):
        v = cam.to_dict()
        if color_paths is not None:
            v["color"] = str(color_paths[k])
        if depth_paths is not None:
            v["depth"] = str(depth_paths[k])
        views.append(v)
    Path(path).write_text(json.dumps({"views": views}, indent=1))
