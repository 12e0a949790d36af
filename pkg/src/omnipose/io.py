"""On-disk formats: tensor files, COCO-style keypoint files, JSON configs, weight directories.

Tensor file layout (all little-endian)::

    8 bytes   magic  b"OMNITEN\\0"
    4 bytes   uint32 header length L
    L bytes   UTF-8 JSON {"dtype": "f32" | "f64", "shape": [...]}
    payload   raw values, row-major
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from omnipose.codec import PoseAnnotation
from omnipose.gdm import GdmConfig, UpsampleGeometry
from omnipose.metrics import OksConfig, coco_keypoint_names, default_falloffs
from omnipose.model import BackboneConfig, Model, ModelConfig, layer_specs
from omnipose.waspv2 import WaspConfig

MAGIC = b"OMNITEN\0"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
TENSOR_SUFFIX = ".omt"


class FormatError(ValueError):
    """Malformed file contents; the message names the byte offset or JSON path."""


class SchemaError(FormatError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# ---------------------------------------------------------------------------
# tensor files


def tensor_bytes(t: np.ndarray, dtype: str = "f64") -> bytes:
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    arr = np.ascontiguousarray(np.asarray(t), dtype=DTYPES[dtype])
    header = json.dumps({"dtype": dtype, "shape": list(arr.shape)}, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes(order="C")


def write_tensor(path, t: np.ndarray, dtype: str = "f64") -> None:
    Path(path).write_bytes(tensor_bytes(t, dtype))


def parse_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise FormatError(f"byte 0: file is {len(buf)} bytes, shorter than the 12-byte preamble")
    if buf[:8] != MAGIC:
        raise FormatError(f"byte 0: bad magic {buf[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", buf[8:12])
    if 12 + hlen > len(buf):
        raise FormatError(f"byte 8: header length {hlen} runs past end of file ({len(buf)} bytes)")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"byte 12: header is not UTF-8 JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("dtype") not in DTYPES:
        raise FormatError(f"byte 12: header dtype must be 'f32' or 'f64', got {header!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape):
        raise FormatError(f"byte 12: header shape must be a list of positive integers, got {shape!r}")
    dt = DTYPES[header["dtype"]]
    start = 12 + hlen
    expected = int(np.prod(shape)) * dt.itemsize
    if len(buf) - start != expected:
        raise FormatError(
            f"byte {start}: payload is {len(buf) - start} bytes, expected {expected} "
            f"for shape {shape} {header['dtype']}"
        )
    return np.frombuffer(buf, dtype=dt, offset=start).reshape(shape).astype(np.float64)


def read_tensor(path) -> np.ndarray:
    try:
        return parse_tensor(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# JSON helpers


def _load_json(path) -> Any:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def dump_json(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise SchemaError(path, msg)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


# ---------------------------------------------------------------------------
# keypoint files


@dataclasses.dataclass
class KeypointFile:
    keypoint_names: list[str]
    images: list[dict]
    annotations: list[PoseAnnotation]
    k: list[float] | None = None

    @property
    def num_joints(self) -> int:
        return len(self.keypoint_names)

    def by_image(self) -> dict:
        out: dict = {img["id"]: [] for img in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(a)
        return out

    def to_dict(self) -> dict:
        cat: dict = {"keypoints": list(self.keypoint_names)}
        if self.k is not None:
            cat["k_i"] = list(self.k)
        anns = []
        for a in self.annotations:
            d: dict = {"image_id": a.image_id, "id": a.id, "keypoints": a.to_flat()}
            if a.area is not None:
                d["area"] = a.area
            if a.head_size is not None:
                d["head_size"] = a.head_size
            if a.score is not None:
                d["score"] = a.score
            anns.append(d)
        return {"categories": [cat], "images": list(self.images), "annotations": anns}


def parse_keypoints(doc: Any, kind: str = "gt") -> KeypointFile:
    """Validate a keypoint document. ``kind`` is ``"gt"`` (score forbidden) or ``"pred"`` (score required)."""
    if kind not in ("gt", "pred"):
        raise ValueError("kind must be 'gt' or 'pred'")
    _expect(isinstance(doc, dict), "$", "document must be a JSON object")
    cats = doc.get("categories")
    _expect(isinstance(cats, list) and len(cats) >= 1, "$.categories", "must be a non-empty list")
    names = cats[0].get("keypoints") if isinstance(cats[0], dict) else None
    _expect(isinstance(names, list) and names and all(isinstance(n, str) for n in names),
            "$.categories[0].keypoints", "must be a non-empty list of names")
    k = cats[0].get("k_i")
    if k is not None:
        _expect(isinstance(k, list) and len(k) == len(names) and all(_is_num(x) and x > 0 for x in k),
                "$.categories[0].k_i", f"must be {len(names)} positive numbers")
    images = doc.get("images", [])
    _expect(isinstance(images, list), "$.images", "must be a list")
    for i, img in enumerate(images):
        _expect(isinstance(img, dict) and "id" in img, f"$.images[{i}]", "must be an object with an id")
    anns_doc = doc.get("annotations")
    _expect(isinstance(anns_doc, list), "$.annotations", "must be a list")
    anns = []
    for i, a in enumerate(anns_doc):
        p = f"$.annotations[{i}]"
        _expect(isinstance(a, dict), p, "must be an object")
        for key in ("image_id", "id", "keypoints"):
            _expect(key in a, f"{p}.{key}", "is required")
        kp = a["keypoints"]
        _expect(isinstance(kp, list) and len(kp) == 3 * len(names), f"{p}.keypoints",
                f"must have {3 * len(names)} entries (3 x {len(names)} joints), got "
                f"{len(kp) if isinstance(kp, list) else type(kp).__name__}")
        _expect(all(_is_num(x) for x in kp), f"{p}.keypoints", "entries must be finite numbers")
        for j in range(len(names)):
            _expect(kp[3 * j + 2] in (0, 1, 2), f"{p}.keypoints[{3 * j + 2}]", "visibility must be 0, 1 or 2")
        for key in ("area", "head_size"):
            if a.get(key) is not None:
                _expect(_is_num(a[key]) and a[key] > 0, f"{p}.{key}", "must be a positive number")
        if kind == "pred":
            _expect(_is_num(a.get("score")), f"{p}.score", "is required for predictions")
        else:
            _expect("score" not in a, f"{p}.score", "is not allowed in ground truth")
        anns.append(PoseAnnotation.from_flat(
            kp, area=a.get("area"), head_size=a.get("head_size"), id=a["id"],
            image_id=a["image_id"], score=a.get("score")))
    return KeypointFile(list(names), list(images), anns, list(k) if k is not None else None)


def read_keypoints(path, kind: str = "gt") -> KeypointFile:
    try:
        return parse_keypoints(_load_json(path), kind)
    except SchemaError as exc:
        raise SchemaError(f"{path}:{exc.path}", str(exc).split(": ", 1)[1]) from None


def write_keypoints(kf: KeypointFile, path) -> None:
    dump_json(kf.to_dict(), path)


def default_keypoint_names(k: int) -> list[str]:
    names = coco_keypoint_names()
    return names if k == len(names) else [f"joint{i}" for i in range(k)]


# ---------------------------------------------------------------------------
# configs


def _build(cls, doc, path: str, nested: Mapping[str, Any] | None = None):
    """Instantiate a frozen dataclass from a JSON object, rejecting unknown fields."""
    _expect(isinstance(doc, dict), path, f"must be an object for {cls.__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        _expect(key in names, f"{path}.{key}", f"unknown field for {cls.__name__}")
    kwargs = {}
    for key, val in doc.items():
        sub = (nested or {}).get(key)
        if sub is not None and val is not None:
            val = sub(val, f"{path}.{key}")
        elif isinstance(val, list):
            val = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SchemaError(path, str(exc)) from None


def _gdm(doc, path):
    return _build(GdmConfig, doc, path, {"upsample": lambda d, p: _build(UpsampleGeometry, d, p)})


def _backbone(doc, path):
    return _build(BackboneConfig, doc, path, {"gdm": _gdm})


def _wasp(doc, path):
    return _build(WaspConfig, doc, path)


def model_config_from_dict(doc) -> ModelConfig:
    """``{"backbone": null, "wasp": null}`` is the empty model; omitted sections take defaults."""
    return _build(ModelConfig, doc, "$", {"backbone": _backbone, "wasp": _wasp})


def model_config_to_dict(cfg: ModelConfig) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def read_model_config(path) -> ModelConfig:
    try:
        return model_config_from_dict(_load_json(path))
    except SchemaError as exc:
        raise SchemaError(f"{path}:{exc.path}", str(exc).split(": ", 1)[1]) from None


def oks_config_from_dict(doc) -> OksConfig:
    _expect(isinstance(doc, dict), "$", "must be an object")
    doc = dict(doc)
    for key in ("medium_range", "large_range"):
        if key in doc:
            _expect(isinstance(doc[key], list) and len(doc[key]) == 2, f"$.{key}", "must be [lo, hi]")
            doc[key] = [math.inf if v is None else v for v in doc[key]]
    return _build(OksConfig, doc, "$")


def read_oks_config(path) -> OksConfig:
    return oks_config_from_dict(_load_json(path))


# ---------------------------------------------------------------------------
# weights


def save_weights(model: Model, directory, dtype: str = "f64") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, value in model.params.items():
        write_tensor(d / f"{name}{TENSOR_SUFFIX}", value, dtype)


def load_weights(cfg: ModelConfig, directory) -> Model:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"weights directory {d} does not exist")
    params = {}
    for spec in layer_specs(cfg):
        for key, shape in spec.param_shapes().items():
            name = f"{spec.name}.{key}"
            f = d / f"{name}{TENSOR_SUFFIX}"
            if not f.exists():
                raise FormatError(f"missing weight file {f}")
            t = read_tensor(f)
            if t.shape != shape:
                raise FormatError(f"{f}: shape {t.shape} does not match expected {shape}")
            params[name] = t
    return Model(cfg, params)


def oks_config_for(kf: KeypointFile, base: OksConfig | None = None) -> OksConfig:
    """Falloffs from the file's category when present, else from ``base`` / the COCO defaults."""
    base = base or OksConfig()
    if kf.k is not None:
        return dataclasses.replace(base, k=tuple(kf.k))
    if len(base.k) != kf.num_joints:
        if kf.num_joints == len(default_falloffs()):
            return dataclasses.replace(base, k=tuple(default_falloffs()))
        raise SchemaError("$.categories[0].k_i", f"required for {kf.num_joints}-joint data (no default falloffs)")
    return base
