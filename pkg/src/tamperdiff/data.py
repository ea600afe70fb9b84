"""Dataset plumbing: manifests, preprocessing, and a synthetic splice
generator with exact ground truth.

Synthetic samples splice a random elliptical or polygonal region from a
donor image into a host image. Outside the region the forged image is
bit-identical to the host, which doubles as the pristine original for
the paired task. Real corpora plug in through the same manifest format.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .conditioner import TaskMode

__all__ = [
    "ForgerySample",
    "ManifestRecord",
    "DatasetManifest",
    "DataError",
    "load_manifest",
    "save_manifest",
    "iterate",
    "load_sample",
    "preprocess",
    "synth_forgery",
    "make_base_images",
    "to_model_input",
]

MANIFEST_SCHEMA = "tamperdiff-manifest/1"
MIN_AREA, MAX_AREA = 0.02, 0.40


class DataError(RuntimeError):
    """Dataset file missing, undecodable, or malformed."""


@dataclass
class ForgerySample:
    """One record in memory: uint8 RGB images, {0, 1} mask."""

    forged: np.ndarray
    original: np.ndarray | None
    gt_mask: np.ndarray
    mode: TaskMode
    source_id: str

    def __post_init__(self) -> None:
        if self.mode is TaskMode.CIML and self.original is None:
            raise DataError(f"{self.source_id}: CIML sample without an original image")
        if self.mode is TaskMode.IML and self.original is not None:
            raise DataError(f"{self.source_id}: IML sample carries an original image")
        if self.gt_mask.shape != self.forged.shape[:2]:
            raise DataError(f"{self.source_id}: mask/image size mismatch")


@dataclass(frozen=True)
class ManifestRecord:
    forged: str
    mask: str
    original: str | None = None
    mode: str = "iml"
    source_id: str = ""
    tag: str | None = None  # optional donor/probe grouping for paired corpora

    def to_json(self) -> dict:
        d = {"forged": self.forged, "mask": self.mask, "mode": self.mode,
             "source_id": self.source_id}
        if self.original is not None:
            d["original"] = self.original
        if self.tag is not None:
            d["tag"] = self.tag
        return d


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        header = {"schema": MANIFEST_SCHEMA, "split": manifest.split}
        fh.write(json.dumps(header) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a line-delimited manifest; paths are relative to its directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: bad header: {exc}") from exc
    if header.get("schema") != MANIFEST_SCHEMA:
        raise DataError(f"{path}: unsupported schema {header.get('schema')!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = ManifestRecord(
                forged=d["forged"],
                mask=d["mask"],
                original=d.get("original"),
                mode=d.get("mode", "iml"),
                source_id=d.get("source_id", ""),
                tag=d.get("tag"),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed record: {exc}") from exc
        for rel in (rec.forged, rec.mask, rec.original):
            if rel is not None and not (root / rel).exists():
                raise DataError(f"{path}:{lineno}: referenced file missing: {root / rel}")
        records.append(rec)
    return DatasetManifest(root=root, records=records, split=header.get("split", "train"))


def iterate(
    manifest: DatasetManifest, batch_size: int, shuffle_seed: int | None = None
) -> Iterator[list[ManifestRecord]]:
    """Yield record batches; a fixed seed gives a fixed order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(manifest.records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    for start in range(0, len(order), batch_size):
        yield [manifest.records[i] for i in order[start : start + batch_size]]


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"failed to decode image {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"failed to decode mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.uint8)


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    """Serialize a {0, 1} mask as a single-channel {0, 255} image."""
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, mode="L").save(path)


def load_sample(
    manifest: DatasetManifest, record: ManifestRecord, mode: TaskMode | str | None = None
) -> ForgerySample:
    """Materialize one record; ``mode`` overrides the record's task mode."""
    mode = TaskMode(mode) if mode is not None else TaskMode(record.mode)
    forged = _read_rgb(manifest.root / record.forged)
    gt = _read_mask(manifest.root / record.mask)
    original = None
    if mode is TaskMode.CIML:
        if record.original is None:
            raise DataError(f"{record.source_id}: CIML requested but record has no original")
        original = _read_rgb(manifest.root / record.original)
    return ForgerySample(forged, original, gt, mode, record.source_id)


def _resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    return np.asarray(Image.fromarray(arr).resize((size, size), Image.BILINEAR))


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray((mask * 255).astype(np.uint8), mode="L")
    return (np.asarray(img.resize((size, size), Image.NEAREST)) >= 128).astype(np.uint8)


def _jpeg_roundtrip(arr: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with Image.open(buf) as img:
        return np.asarray(img.convert("RGB"))


def preprocess(
    sample: ForgerySample,
    size: int,
    jpeg_aug: bool = False,
    rng: np.random.Generator | None = None,
    quality_range: tuple[int, int] = (30, 100),
    aug_original: bool = True,
) -> ForgerySample:
    """Resize to size x size; optionally JPEG-recompress at a random quality.

    Images resize bilinearly, the mask nearest-neighbor so it stays
    binary. With ``aug_original`` the paired original gets its own
    independently drawn quality.
    """
    if jpeg_aug and rng is None:
        raise ValueError("jpeg_aug requires an rng")
    forged = _resize_image(sample.forged, size)
    original = _resize_image(sample.original, size) if sample.original is not None else None
    gt = _resize_mask(sample.gt_mask, size)
    if jpeg_aug:
        lo, hi = quality_range
        forged = _jpeg_roundtrip(forged, int(rng.integers(lo, hi + 1)))
        if original is not None and aug_original:
            original = _jpeg_roundtrip(original, int(rng.integers(lo, hi + 1)))
    return ForgerySample(forged, original, gt, sample.mode, sample.source_id)


def make_base_images(rng: np.random.Generator, count: int, size: int) -> list[np.ndarray]:
    """Procedural base images: smooth random color fields plus light grain."""
    bases = []
    for _ in range(count):
        cells = int(rng.integers(3, 7))
        control = rng.uniform(0.05, 0.95, size=(cells, cells, 3))
        img = np.asarray(
            Image.fromarray((control * 255).astype(np.uint8)).resize(
                (size, size), Image.BILINEAR
            ),
            dtype=np.float64,
        )
        img = img + rng.normal(0.0, 6.0, size=img.shape)
        bases.append(np.clip(img, 0, 255).astype(np.uint8))
    return bases


def _random_region(rng: np.random.Generator, size: int) -> np.ndarray:
    """A {0, 1} region with area fraction in [MIN_AREA, MAX_AREA]."""
    total = size * size
    for _ in range(200):
        frac = rng.uniform(MIN_AREA, MAX_AREA)
        target = frac * total
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
        img = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(img)
        if rng.random() < 0.5:
            aspect = rng.uniform(0.5, 2.0)
            a = np.sqrt(target / np.pi * aspect)
            b = target / np.pi / a
            draw.ellipse((cx - a, cy - b, cx + a, cy + b), fill=1)
        else:
            k = int(rng.integers(4, 9))
            angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=k))
            # Mean star-polygon area ~ pi * E[r^2]; scale radii to hit target
            radii = rng.uniform(0.55, 1.0, size=k)
            scale = np.sqrt(target / (np.pi * np.mean(radii**2)))
            pts = [
                (cx + r * scale * np.cos(t), cy + r * scale * np.sin(t))
                for r, t in zip(radii, angles)
            ]
            draw.polygon(pts, fill=1)
        region = np.asarray(img, dtype=np.uint8)
        actual = region.sum() / total
        if MIN_AREA <= actual <= MAX_AREA:
            return region
    raise DataError("could not generate a region within the area bounds")


def synth_forgery(
    base_images: Sequence[np.ndarray],
    rng: np.random.Generator,
    n: int,
    root: str | Path,
    split: str = "train",
    mode: str = "ciml",
) -> DatasetManifest:
    """Generate n spliced samples under ``root`` and return their manifest.

    Each sample pastes a donor region into a distinct host; the host is
    kept as the pristine original, so records serve either task mode.
    """
    if len(base_images) < 2:
        raise DataError(f"need at least 2 base images, got {len(base_images)}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        host_i, donor_i = rng.choice(len(base_images), size=2, replace=False)
        host, donor = base_images[host_i], base_images[donor_i]
        size = host.shape[0]
        region = _random_region(rng, size)
        forged = np.where(region[..., None] != 0, donor, host)
        sid = f"synth-{split}-{i:05d}"
        paths = {
            "forged": f"images/{sid}_forged.png",
            "original": f"images/{sid}_orig.png",
            "mask": f"masks/{sid}_mask.png",
        }
        Image.fromarray(forged).save(root / paths["forged"])
        Image.fromarray(host).save(root / paths["original"])
        write_mask(region, root / paths["mask"])
        records.append(
            ManifestRecord(
                forged=paths["forged"],
                mask=paths["mask"],
                original=paths["original"],
                mode=mode,
                source_id=sid,
            )
        )
    manifest = DatasetManifest(root=root, records=records, split=split)
    save_manifest(manifest, root / f"{split}.manifest")
    return manifest


def to_model_input(
    images: np.ndarray | Sequence[np.ndarray],
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.5, 0.5, 0.5),
) -> torch.Tensor:
    """uint8 HWC image(s) -> normalized float32 (B, 3, H, W) tensor."""
    arr = np.stack(images) if not isinstance(images, np.ndarray) else images
    if arr.ndim == 3:
        arr = arr[None]
    if not arr.flags.writeable:
        arr = arr.copy()
    x = torch.from_numpy(np.ascontiguousarray(arr)).float().div_(255.0)
    x = x.permute(0, 3, 1, 2)
    mean_t = torch.tensor(mean).view(1, 3, 1, 1)
    std_t = torch.tensor(std).view(1, 3, 1, 1)
    return (x - mean_t) / std_t
