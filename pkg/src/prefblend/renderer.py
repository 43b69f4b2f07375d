"""Deterministic procedural image generator and the similarity oracles.

Stands in for a heavyweight generative model: an image is a fixed base
canvas of simple shapes plus a linear blend of per-adapter style fields,
pushed through a smooth compressive tone map. The blend is exactly linear
in the coefficients before tone mapping, so the image is continuous in
alpha, and large coefficient sums saturate the tone curve and wash out
structure.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image

from .core import MergeCoefficients

TEXTURES = ("stripes", "rings", "noise-grain", "dots")

_FIELD_GAIN = 0.55  # style field amplitude relative to canvas range


@dataclass(frozen=True)
class StyleBasis:
    """Per-adapter style parameters, a pure function of (collection seed, id)."""

    adapter_id: int
    hue: float
    angle: float
    frequency: float  # cycles per image, in [2, 16]
    texture: str
    palette: np.ndarray  # (3, 3) RGB anchors in [0, 1]


@dataclass(frozen=True)
class RenderSpec:
    width: int = 128
    height: int = 128
    prompt_seed: int = 0
    collection_seed: int = 0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("render size must be at least 16x16")


def style_basis(collection_seed: int, adapter_id: int) -> StyleBasis:
    rng = np.random.default_rng(
        np.random.SeedSequence([int(collection_seed), int(adapter_id)])
    )
    return StyleBasis(
        adapter_id=int(adapter_id),
        hue=float(rng.uniform(0.0, 2.0 * np.pi)),
        angle=float(rng.uniform(0.0, np.pi)),
        frequency=float(rng.uniform(2.0, 16.0)),
        texture=TEXTURES[int(rng.integers(len(TEXTURES)))],
        palette=rng.random((3, 3)),
    )


def _grids(spec: RenderSpec):
    ys = (np.arange(spec.height) + 0.5) / spec.height
    xs = (np.arange(spec.width) + 0.5) / spec.width
    return np.meshgrid(xs, ys)  # xx, yy in [0,1]


def _carrier(basis: StyleBasis, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    t = xx * np.cos(basis.angle) + yy * np.sin(basis.angle)
    t_perp = -xx * np.sin(basis.angle) + yy * np.cos(basis.angle)
    f = 2.0 * np.pi * basis.frequency
    if basis.texture == "stripes":
        return np.sin(f * t)
    if basis.texture == "rings":
        cx = 0.5 + 0.3 * np.cos(basis.hue)
        cy = 0.5 + 0.3 * np.sin(basis.hue)
        rad = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        return np.sin(f * rad)
    if basis.texture == "dots":
        return np.sin(f * t) * np.sin(f * t_perp)
    # noise-grain: a few incommensurate plane waves, fully determined by the
    # basis parameters so the field stays smooth and reproducible
    acc = np.zeros_like(xx)
    for octave in range(1, 4):
        ang = basis.hue + 2.39996 * octave  # golden-angle rotation per octave
        w = f * (0.7 + 0.45 * octave)
        acc += np.sin(w * (xx * np.cos(ang) + yy * np.sin(ang)) + basis.hue * octave) / octave
    return acc / 1.8333


def _style_field(basis: StyleBasis, spec: RenderSpec) -> np.ndarray:
    xx, yy = _grids(spec)
    carrier = _carrier(basis, xx, yy)
    pal = basis.palette
    contrast = (pal[0] - pal[1])[None, None, :]
    tint = (pal[2] - 0.5)[None, None, :]
    field = carrier[:, :, None] * contrast + (carrier[:, :, None] ** 2 - 0.5) * tint * 0.5
    return _FIELD_GAIN * field


@lru_cache(maxsize=8)
def _collection_fields(collection_seed: int, n: int, width: int, height: int) -> np.ndarray:
    spec = RenderSpec(width=width, height=height, collection_seed=collection_seed)
    fields = np.stack(
        [_style_field(style_basis(collection_seed, i), spec) for i in range(n)]
    )
    fields.setflags(write=False)
    return fields


@lru_cache(maxsize=32)
def _base_canvas(prompt_seed: int, width: int, height: int) -> np.ndarray:
    """Base content: a background gradient plus a few soft-edged shapes."""
    spec = RenderSpec(width=width, height=height, prompt_seed=prompt_seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(prompt_seed), 9173]))
    xx, yy = _grids(spec)
    c0, c1 = rng.uniform(0.25, 0.75, 3), rng.uniform(0.25, 0.75, 3)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    mix = 0.5 + 0.5 * np.sin(2.0 * np.pi * (xx * np.cos(phase) + yy * np.sin(phase)))
    canvas = mix[:, :, None] * c0[None, None, :] + (1 - mix[:, :, None]) * c1[None, None, :]
    for _ in range(2 + int(rng.integers(3))):
        cx, cy = rng.uniform(0.15, 0.85, 2)
        radius = rng.uniform(0.08, 0.25)
        color = rng.uniform(0.15, 0.85, 3)
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        mask = 1.0 / (1.0 + np.exp((dist - radius) * 40.0))  # soft edge
        canvas = canvas * (1 - 0.9 * mask[:, :, None]) + 0.9 * mask[:, :, None] * color
    canvas.setflags(write=False)
    return canvas


def _tone_map(field: np.ndarray) -> np.ndarray:
    """Smooth rational saturation onto (0, 1); monotone and Lipschitz, so
    structure compresses (rather than clips) as the blend sum grows."""
    z = 2.2 * (field - 0.5)
    return 0.5 + 0.5 * z / (1.0 + np.abs(z))


def render_field(alpha: MergeCoefficients, spec: RenderSpec) -> np.ndarray:
    """Pre-quantization float image in (0,1), shape (H, W, 3)."""
    fields = _collection_fields(spec.collection_seed, alpha.n, spec.width, spec.height)
    base = _base_canvas(spec.prompt_seed, spec.width, spec.height)
    raw = base + np.tensordot(alpha.values, fields, axes=1)
    return _tone_map(raw)


def render(alpha: MergeCoefficients, spec: RenderSpec) -> np.ndarray:
    """8-bit RGB image, shape (H, W, 3); deterministic in all inputs."""
    return np.clip(np.rint(render_field(alpha, spec) * 255.0), 0, 255).astype(np.uint8)


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_similarity(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """1 - mean absolute per-channel difference on [0,1]-scaled pixels."""
    if img_a.shape != img_b.shape:
        raise ValueError("images must share dimensions")
    a = img_a.astype(np.float64) / 255.0
    b = img_b.astype(np.float64) / 255.0
    return float(1.0 - np.abs(a - b).mean())


def coefficient_similarity(
    alpha: MergeCoefficients, alpha_gt: MergeCoefficients, scale: float = 1.0
) -> float:
    """exp(-||alpha - alpha_gt||_2 / scale), in (0, 1]."""
    if alpha.n != alpha_gt.n:
        raise ValueError("coefficient vectors must share length")
    return float(np.exp(-np.linalg.norm(alpha.values - alpha_gt.values) / scale))
