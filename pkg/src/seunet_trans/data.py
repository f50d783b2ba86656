"""Manifest-driven image/mask ingestion and the synthetic ellipse dataset.

A manifest is a UTF-8, tab-separated file with one ``image<TAB>mask`` pair
per line; relative paths are taken relative to the manifest's directory.
Files may be 8-bit PNG or binary PGM/PPM. Images are resized bilinearly and
scaled to [0, 1]; masks are resized with nearest-neighbor (bilinear would
invent non-binary values) and binarized at intensity 128.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

__all__ = [
    "DataError",
    "ManifestNotFoundError",
    "ManifestEntryMissingError",
    "DuplicateManifestEntryError",
    "ManifestEntry",
    "Manifest",
    "Sample",
    "load_manifest",
    "load_sample",
    "load_dataset",
    "split_dataset",
    "EllipseParams",
    "SyntheticDataset",
    "generate_synthetic",
    "DatasetPreset",
    "DATASET_PRESETS",
    "write_preset_manifests",
]

MASK_THRESHOLD = 128


class DataError(Exception):
    """Base class for dataset ingestion problems."""


class ManifestNotFoundError(DataError):
    """The manifest file itself does not exist."""


class ManifestEntryMissingError(DataError):
    """A manifest line references a file that does not exist."""


class DuplicateManifestEntryError(DataError):
    """The same image/mask pair appears twice."""


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    mask_path: Path


@dataclass
class Manifest:
    entries: tuple[ManifestEntry, ...]
    target_size: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    source_id: str


def load_manifest(path, target_size: int, split: str = "train") -> Manifest:
    """Parse and validate a manifest; entries keep file order."""
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    seen: set[tuple[str, str]] = set()
    root = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask', got {line!r}")
        image_path = root / parts[0] if not Path(parts[0]).is_absolute() else Path(parts[0])
        mask_path = root / parts[1] if not Path(parts[1]).is_absolute() else Path(parts[1])
        key = (str(image_path), str(mask_path))
        if key in seen:
            raise DuplicateManifestEntryError(f"{path}:{lineno}: duplicate entry {line!r}")
        seen.add(key)
        if not image_path.is_file():
            raise ManifestEntryMissingError(f"{path}:{lineno}: image not found: {image_path}")
        if not mask_path.is_file():
            raise ManifestEntryMissingError(f"{path}:{lineno}: mask not found: {mask_path}")
        entries.append(ManifestEntry(image_path, mask_path))
    return Manifest(entries=tuple(entries), target_size=target_size, split=split)


def load_sample(entry: ManifestEntry, target_size: int) -> Sample:
    """Decode one image/mask pair at the manifest's target size."""
    try:
        with Image.open(entry.image_path) as im:
            image = im.convert("RGB")
            if image.size != (target_size, target_size):
                image = image.resize((target_size, target_size), Image.BILINEAR)
            image_arr = np.asarray(image, dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode image {entry.image_path}: {exc}") from exc
    try:
        with Image.open(entry.mask_path) as im:
            mask = im.convert("L")
            if mask.size != (target_size, target_size):
                mask = mask.resize((target_size, target_size), Image.NEAREST)
            mask_arr = (np.asarray(mask) >= MASK_THRESHOLD).astype(np.float32)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode mask {entry.mask_path}: {exc}") from exc
    return Sample(
        image=np.ascontiguousarray(image_arr.transpose(2, 0, 1)),
        mask=mask_arr[None, :, :],
        source_id=entry.image_path.stem,
    )


def load_dataset(manifest: Manifest) -> list[Sample]:
    return [load_sample(entry, manifest.target_size) for entry in manifest.entries]


def split_dataset(
    entries: Sequence[ManifestEntry],
    train_fraction: float,
    seed: int,
    target_size: int,
) -> tuple[Manifest, Manifest]:
    """Seeded shuffle, then a disjoint, exhaustive train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(entries))
    n_train = int(round(train_fraction * len(entries)))
    train = tuple(entries[i] for i in order[:n_train])
    test = tuple(entries[i] for i in order[n_train:])
    return (
        Manifest(entries=train, target_size=target_size, split="train"),
        Manifest(entries=test, target_size=target_size, split="test"),
    )


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EllipseParams:
    cx: float
    cy: float
    a: float
    b: float
    intensity: float

    def interior(self, size: int) -> np.ndarray:
        """Exact rasterization: (x-cx)^2/a^2 + (y-cy)^2/b^2 <= 1 per pixel."""
        xx = np.arange(size, dtype=np.float64)[None, :]
        yy = np.arange(size, dtype=np.float64)[:, None]
        return (xx - self.cx) ** 2 / self.a**2 + (yy - self.cy) ** 2 / self.b**2 <= 1.0


@dataclass
class SyntheticDataset:
    out_dir: Path
    manifest_path: Path
    manifest: Manifest
    ellipses: list[list[EllipseParams]] = field(default_factory=list)


def generate_synthetic(n: int, size: int, seed: int, out_dir) -> SyntheticDataset:
    """Write ``n`` image/mask pairs of 1-3 bright ellipses on a noisy background.

    The mask is exactly the union of the analytic ellipse interiors; the
    generated parameters are returned so the rasterization can be re-checked.
    Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines: list[str] = []
    all_params: list[list[EllipseParams]] = []
    for i in range(n):
        image = rng.normal(0.12, 0.02, (3, size, size))
        count = int(rng.integers(1, 4))
        params: list[EllipseParams] = []
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(count):
            ell = EllipseParams(
                cx=float(rng.uniform(0.25 * size, 0.75 * size)),
                cy=float(rng.uniform(0.25 * size, 0.75 * size)),
                a=float(rng.uniform(0.14 * size, 0.32 * size)),
                b=float(rng.uniform(0.14 * size, 0.32 * size)),
                intensity=float(rng.uniform(0.82, 0.95)),
            )
            params.append(ell)
            inside = ell.interior(size)
            mask |= inside
            foreground = ell.intensity + rng.normal(0.0, 0.015, (3, size, size))
            image = np.where(inside[None, :, :], foreground, image)
        all_params.append(params)
        image8 = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        image_name = f"images/sample_{i:04d}.png"
        mask_name = f"masks/sample_{i:04d}.png"
        Image.fromarray(image8.transpose(1, 2, 0), mode="RGB").save(out_dir / image_name)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out_dir / mask_name)
        lines.append(f"{image_name}\t{mask_name}")
    manifest_path = out_dir / "manifest.tsv"
    manifest_path.write_text("\n".join(lines) + "\n")
    manifest = load_manifest(manifest_path, target_size=size)
    return SyntheticDataset(
        out_dir=out_dir, manifest_path=manifest_path, manifest=manifest, ellipses=all_params
    )


# ---------------------------------------------------------------------------
# public-dataset manifest presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetPreset:
    """Template counts and target size for one published training setup."""

    name: str
    image_size: int
    sources: tuple[tuple[str, int, int], ...]  # (label, train images, test images)

    @property
    def train_count(self) -> int:
        return sum(s[1] for s in self.sources)

    @property
    def test_count(self) -> int:
        return sum(s[2] for s in self.sources)


DATASET_PRESETS: dict[str, DatasetPreset] = {
    "kvasir": DatasetPreset("kvasir", 512, (("kvasir", 880, 120),)),
    "cvc_clinicdb": DatasetPreset("cvc_clinicdb", 384, (("cvc_clinicdb", 550, 62),)),
    "mixed_polyp": DatasetPreset(
        "mixed_polyp",
        384,
        (
            ("kvasir", 900, 100),
            ("cvc_clinicdb", 550, 62),
            ("cvc_colondb", 0, 380),
            ("endoscene", 0, 60),
        ),
    ),
    "glas": DatasetPreset("glas", 128, (("glas", 85, 80),)),
    "isic2018": DatasetPreset("isic2018", 256, (("isic2018", 2075, 519),)),
    "dsb2018": DatasetPreset("dsb2018", 256, (("dsb2018", 536, 134),)),
}


def write_preset_manifests(name: str, out_dir) -> dict[str, Path]:
    """Write train/test manifest templates for a preset.

    The referenced image files are placeholders the user fills in with the
    published data; counts and target size match the preset.
    """
    if name not in DATASET_PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(DATASET_PRESETS)}")
    preset = DATASET_PRESETS[name]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    for split_index, split in enumerate(("train", "test")):
        lines = []
        for label, train_n, test_n in preset.sources:
            count = train_n if split == "train" else test_n
            for i in range(count):
                lines.append(
                    f"images/{label}_{split}_{i:04d}.png\tmasks/{label}_{split}_{i:04d}.png"
                )
        path = out_dir / f"{preset.name}_{split}.tsv"
        path.write_text("\n".join(lines) + "\n")
        paths[split] = path
    return paths
