"""Procedural benchmark with a controllable spurious cue.

Each class has a distinctive interior texture (oriented stripes whose angle
and frequency are fixed per class; phase and pixel noise vary per sample) —
the invariant feature. A colored border (or corner patch) is the spurious
cue: with probability rho it shows the class-indexed palette color, otherwise
a color drawn uniformly from the other classes' colors. ``rho_train`` applies
to the train and test_id splits, ``rho_ood`` to test_ood. Generation is
deterministic per seed down to the PNG bytes.
"""

from __future__ import annotations

import colorsys
import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image

from .configs import SyntheticBenchConfig
from .errors import ConfigError
from .manifest import DatasetManifest, ExampleRecord, save_manifest

_PALETTE = (
    ("red", (220, 40, 40)),
    ("green", (40, 180, 70)),
    ("blue", (45, 90, 220)),
    ("yellow", (235, 220, 50)),
    ("magenta", (200, 50, 200)),
    ("cyan", (60, 200, 210)),
    ("orange", (240, 140, 30)),
    ("purple", (130, 60, 200)),
    ("teal", (20, 130, 130)),
    ("olive", (130, 130, 40)),
)


def palette(n: int) -> list:
    """``n`` (name, rgb) pairs; beyond the named ten, hue-spaced extras."""
    colors = list(_PALETTE[:n])
    for i in range(len(colors), n):
        r, g, b = colorsys.hsv_to_rgb((i * 0.618034) % 1.0, 0.85, 0.85)
        colors.append((f"color{i}", (int(r * 255), int(g * 255), int(b * 255))))
    return colors


def class_glyph(class_index: int, num_classes: int, size: int,
                phase: float, noise: np.ndarray) -> np.ndarray:
    """Interior texture for one sample: oriented stripes plus pixel noise.

    Returns a uint8 (size, size) array in a mid-gray band so the texture
    never saturates like the border colors do.
    """
    theta = np.pi * class_index / num_classes
    freq = 2.0 + (class_index % 4)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)
    value = 127.0 + 70.0 * wave + noise
    return np.clip(value, 30, 225).astype(np.uint8)


def render_example(cfg: SyntheticBenchConfig, class_index: int, color_rgb: tuple,
                   phase: float, noise: np.ndarray) -> Image.Image:
    size = cfg.image_size
    gray = class_glyph(class_index, cfg.num_classes, size, phase, noise)
    img = np.repeat(gray[:, :, None], 3, axis=2)
    color = np.asarray(color_rgb, dtype=np.uint8)
    if cfg.spurious_channel == "border_color":
        w = max(2, size // 10)
        img[:w, :, :] = color
        img[-w:, :, :] = color
        img[:, :w, :] = color
        img[:, -w:, :] = color
    else:  # corner_patch
        w = max(4, size // 4)
        img[:w, :w, :] = color
    return Image.fromarray(img, mode="RGB")


def spurious_phrase(cfg: SyntheticBenchConfig, color_name: str) -> str:
    if cfg.spurious_channel == "border_color":
        return f"with a {color_name} border"
    return f"with a {color_name} corner patch"


def _draw_color_index(rng: np.random.Generator, class_index: int,
                      num_classes: int, rho: float) -> int:
    """Class color with probability rho, else uniform over the other colors."""
    if rng.random() < rho:
        return class_index
    others = [i for i in range(num_classes) if i != class_index]
    return int(rng.choice(others))


def generate_synthetic_benchmark(cfg: SyntheticBenchConfig, out_dir) -> DatasetManifest:
    """Render the benchmark under ``out_dir`` and return its loaded manifest.

    Writes ``images/*.png`` and ``manifest.jsonl``. Identical configs produce
    byte-identical images and manifest text.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    if cfg.num_classes > 52:
        raise ConfigError(f"num_classes is capped at 52, got {cfg.num_classes}")
    colors = palette(cfg.num_classes)
    class_names = tuple(f"class {i}" for i in range(cfg.num_classes))
    rng = np.random.default_rng(cfg.seed)
    split_plan = (
        ("train", cfg.train_per_class, cfg.rho_train),
        ("test_id", cfg.test_id_per_class, cfg.rho_train),
        ("test_ood", cfg.test_ood_per_class, cfg.rho_ood),
    )
    records = []
    for split, per_class, rho in split_plan:
        for class_index in range(cfg.num_classes):
            for i in range(per_class):
                phase = float(rng.uniform(0.0, 2 * np.pi))
                noise = rng.normal(0.0, 8.0, size=(cfg.image_size, cfg.image_size))
                color_index = _draw_color_index(rng, class_index, cfg.num_classes, rho)
                color_name, color_rgb = colors[color_index]
                img = render_example(cfg, class_index, color_rgb, phase, noise)
                rel_path = f"images/{split}_{class_index:02d}_{i:04d}.png"
                img.save(out_dir / rel_path, format="PNG")
                caption = f"an image of {class_names[class_index]}"
                if cfg.caption_spurious:
                    caption = f"{caption} {spurious_phrase(cfg, color_name)}"
                records.append(ExampleRecord(
                    example_id=f"{split}-{class_index}-{i}",
                    image_path=rel_path,
                    caption=caption,
                    label=class_index,
                    class_name=class_names[class_index],
                    split=split,
                    source_dataset="synthetic",
                ))
    manifest = DatasetManifest(
        name="synthetic",
        class_names=class_names,
        records=records,
        provenance={"generator": dataclasses.asdict(cfg)},
        root=str(out_dir),
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def rendered_color_index(manifest: DatasetManifest, rec: ExampleRecord) -> int:
    """Palette index of the rendered spurious color, read from the pixels.

    Pixel (0, 0) lies inside the border frame and inside the corner patch, and
    is painted an exact palette RGB value.
    """
    with Image.open(manifest.resolve_path(rec)) as img:
        rgb = tuple(int(v) for v in np.asarray(img.convert("RGB"))[0, 0])
    colors = palette(len(manifest.class_names))
    for i, (_, ref) in enumerate(colors):
        if rgb == ref:
            return i
    raise ConfigError(f"pixel (0,0) of {rec.example_id!r} is {rgb}, not a palette color")


def spurious_agreement_rate(manifest: DatasetManifest, split: str) -> float:
    """Fraction of a split whose rendered color matches its class color."""
    recs = manifest.split_records(split)
    if not recs:
        raise ConfigError(f"split {split!r} is empty")
    agree = sum(1 for rec in recs if rendered_color_index(manifest, rec) == rec.label)
    return agree / len(recs)
