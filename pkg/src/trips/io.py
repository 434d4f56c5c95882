"""Binary tensor files, PPM images, overlays, traces and run configs."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ConfigError, ForwardTrace, ModelConfig, SelectionConfig
from .kernels import SeededRng
from .selection import GuidanceMode, GuidanceSource

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1
DTYPE_F64_LE = 0
TRACE_SCHEMA_VERSION = 1
DEFAULT_DIM_FACTOR = 0.25


class FormatError(ValueError):
    """A file does not follow its declared format."""


# -- tensor files ---------------------------------------------------------------
#
# layout: b"TNSR" | u8 version (1) | u8 dtype (0 = f64 LE) | u8 rank |
#         rank x u64 LE dims | row-major f64 LE payload


def tensor_to_bytes(tensor) -> bytes:
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim > 255:
        raise ValueError("rank does not fit in one byte")
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, DTYPE_F64_LE, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 7 or data[:4] != TENSOR_MAGIC:
        raise FormatError("missing TNSR magic")
    version, dtype, rank = struct.unpack_from("<BBB", data, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    if dtype != DTYPE_F64_LE:
        raise FormatError(f"unsupported dtype code {dtype}")
    offset = 7 + 8 * rank
    if len(data) < offset:
        raise FormatError("truncated dimension list")
    dims = struct.unpack_from(f"<{rank}Q", data, 7)
    expected = 8 * math.prod(dims)
    if len(data) - offset != expected:
        raise FormatError(f"payload is {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64).reshape(dims)


def save_tensor(tensor, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(tensor))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# -- PPM ---------------------------------------------------------------------------


def _ppm_tokens(data: bytes):
    """The four P6 header fields and the offset of the raster; comments are skipped."""
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PPM header")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """P6 bytes -> uint8 array [H, W, 3]."""
    tokens, offset = _ppm_tokens(data)
    if tokens[0] != b"P6":
        raise FormatError(f"expected P6 magic, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-numeric PPM header field") from exc
    if width < 1 or height < 1:
        raise FormatError("PPM dimensions must be positive")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    raster = data[offset:]
    if len(raster) < width * height * 3:
        raise FormatError("truncated PPM payload")
    return np.frombuffer(raster[: width * height * 3], dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def load_image_ppm(path) -> np.ndarray:
    """Read a P6 file as a [3, H, W] float tensor scaled to [0, 1]."""
    return decode_ppm(Path(path).read_bytes()).transpose(2, 0, 1) / 255.0


def image_to_bytes(image) -> np.ndarray:
    """[3, H, W] tensor in [0, 1] -> uint8 [H, W, 3] (round half to even, clipped)."""
    image = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image_ppm(image, path) -> None:
    Path(path).write_bytes(encode_ppm(image_to_bytes(image)))


def synthetic_image(size: int, seed: int) -> np.ndarray:
    """Smooth random image: low-frequency sinusoids plus a little noise, in [0, 1]."""
    rng = SeededRng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    channels = []
    for _ in range(3):
        fx, fy, px, py = rng.uniform(4) * np.array([6.0, 6.0, 2 * math.pi, 2 * math.pi])
        base = 0.5 + 0.35 * np.sin(fx * xx * 2 * math.pi + px) * np.cos(fy * yy * 2 * math.pi + py)
        channels.append(base + 0.05 * rng.normal(size * size).reshape(size, size))
    return np.clip(np.stack(channels), 0.0, 1.0)


# -- overlays ----------------------------------------------------------------------


def overlay_pixels(image, mask: np.ndarray, patch_size: int, dim: float = DEFAULT_DIM_FACTOR) -> np.ndarray:
    """uint8 [H, W, 3]: cells where ``mask`` is false are scaled by ``dim``.

    Dimmed byte = round_half_even(byte * dim).
    """
    pixels = image_to_bytes(image)
    rows, cols = mask.shape
    if pixels.shape[:2] != (rows * patch_size, cols * patch_size):
        raise ValueError("mask grid does not cover the image")
    cell = np.repeat(np.repeat(mask, patch_size, axis=0), patch_size, axis=1)
    dimmed = np.rint(pixels.astype(np.float64) * dim).astype(np.uint8)
    return np.where(cell[:, :, None], pixels, dimmed)


def save_overlay(image, trace: ForwardTrace, layer: int, path, patch_size: int, dim: float = DEFAULT_DIM_FACTOR) -> np.ndarray:
    """Write the overlay for selection layer ``layer``; returns the pixel array."""
    if layer not in trace.kept_masks:
        raise ValueError(f"layer {layer} is not a selection layer in this trace")
    pixels = overlay_pixels(image, trace.kept_masks[layer], patch_size, dim)
    Path(path).write_bytes(encode_ppm(pixels))
    return pixels


# -- traces ------------------------------------------------------------------------


def trace_records(trace: ForwardTrace, top: int = 5) -> list[dict]:
    """One record per selection layer, in layer order.

    Fields: schema, layer, n_before (sequence length entering the layer),
    n_candidates, k, n_after, kept_indices, fused_mass, top_scores
    (``[index, score]`` pairs, best first).
    """
    records = []
    for layer in trace.selection_layers:
        out = trace.outcomes[layer]
        order = np.argsort(-out.scores, kind="stable")[:top]
        records.append(
            {
                "schema": TRACE_SCHEMA_VERSION,
                "layer": layer,
                "n_before": trace.lengths_before[layer],
                "n_candidates": out.n,
                "k": out.k,
                "n_after": trace.lengths[layer - 1],
                "kept_indices": list(out.kept_indices),
                "fused_mass": out.fused_mass,
                "top_scores": [[int(i), float(out.scores[i])] for i in order],
            }
        )
    return records


def emit_trace_json(trace: ForwardTrace, path) -> None:
    with open(path, "w") as fh:
        for record in trace_records(trace):
            fh.write(json.dumps(record) + "\n")


# -- run configs -------------------------------------------------------------------


def _int_list(value: str) -> tuple[int, ...]:
    value = value.strip()
    if value.lower() in ("", "none", "-"):
        return ()
    return tuple(int(v) for v in value.split(","))


def _float_list(value: str) -> tuple[float, ...]:
    value = value.strip()
    if value.lower() in ("", "none", "-"):
        return ()
    return tuple(float(v) for v in value.split(","))


def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


_RUN_KEYS = {
    "layers": int,
    "width": int,
    "heads": int,
    "patch_size": int,
    "image_size": int,
    "seed": int,
    "image": str,
    "image_seed": int,
    "locations": _int_list,
    "rates": _float_list,
    "rounding": str,
    "mode": str,
    "no_itf": _bool,
    "no_td_att": _bool,
    "key_projected": _bool,
    "norm": str,
    "guidance": str,
    "guidance_seed": int,
    "out": str,
}


@dataclass
class RunConfig:
    """Everything a ``forward``/``visualize`` run needs.

    Loaded from a ``key = value`` text file; ``#`` starts a comment.
    """

    layers: int = 12
    width: int = 64
    heads: int = 4
    patch_size: int = 16
    image_size: int = 96
    seed: int = 0
    image: str | None = None
    image_seed: int = 0
    locations: tuple[int, ...] = (5, 10)
    rates: tuple[float, ...] = (0.7, 0.7)
    rounding: str = "floor"
    mode: str = "text-cls"
    no_itf: bool = False
    no_td_att: bool = False
    key_projected: bool = False
    norm: str = "post"
    guidance: str | None = None
    guidance_seed: int = 1
    out: str | None = None

    def update(self, **values) -> "RunConfig":
        for key, value in values.items():
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                setattr(self, key, value)
        return self

    def model_config(self) -> ModelConfig:
        if self.norm not in ("post", "pre"):
            raise ConfigError(f"norm must be 'post' or 'pre', got {self.norm!r}")
        try:
            mode = GuidanceMode(
                GuidanceSource(self.mode),
                disable_fusion=self.no_itf,
                disable_td_att=self.no_td_att,
                key_projected=self.key_projected,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return ModelConfig(
            layers=self.layers,
            width=self.width,
            heads=self.heads,
            patch_size=self.patch_size,
            image_size=self.image_size,
            selection=SelectionConfig(self.locations, self.rates, self.rounding),
            mode=mode,
            seed=self.seed,
            norm_first=self.norm == "pre",
        )


def parse_run_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _RUN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _RUN_KEYS[key](value))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg.model_config()
    return cfg


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text())
