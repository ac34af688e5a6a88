"""
Imaging - decode grayscale images, quantize gray levels, read dataset manifests

Inputs are 8-bit PNG or binary PGM (P5). Color PNGs are reduced to gray with
the luma weights 0.299 R + 0.587 G + 0.114 B, rounded to nearest.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, field_validator

from scoring.errors import ImageFormatError, ValidationError

logger = logging.getLogger(__name__)

SCORE_LABELS = (0, 1, 2, 3)
MANIFEST_HEADER = ("path", "label", "source")

PathLike = Union[str, Path]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class GrayImage:
    """8-bit gray image, pixels stored row-major as a (height, width) uint8 array"""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2:
            raise ValidationError(f"gray image must be 2-D, got shape {pixels.shape}")
        if pixels.dtype != np.uint8:
            if pixels.size and (pixels.min() < 0 or pixels.max() > 255):
                raise ValidationError("gray values must lie in 0..255")
            pixels = pixels.astype(np.uint8)
        height, width = pixels.shape
        if width < 2 or height < 2:
            raise ValidationError(f"image is {width}x{height}; at least 2x2 is needed for neighbor pairs")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class QuantizedImage:
    """Image of discrete gray levels in [0, levels)"""

    pixels: np.ndarray
    levels: int

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if self.levels < 2:
            raise ValidationError("quantized image needs at least 2 levels")
        if pixels.ndim != 2:
            raise ValidationError(f"quantized image must be 2-D, got shape {pixels.shape}")
        if pixels.size and (pixels.min() < 0 or pixels.max() >= self.levels):
            raise ValidationError(f"pixel values must lie in [0, {self.levels})")
        object.__setattr__(self, "pixels", _frozen(pixels.astype(np.intp)))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    path: Path
    label: int
    source: str

    @field_validator("label")
    @classmethod
    def _score_scale(cls, value: int) -> int:
        if value not in SCORE_LABELS:
            raise ValueError(f"label {value} is outside the 0-3 score scale")
        return value

    @field_validator("source")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("source tag must not be empty")
        return value


class DatasetManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: List[ManifestEntry]

    @field_validator("entries")
    @classmethod
    def _at_least_one(cls, value: List[ManifestEntry]) -> List[ManifestEntry]:
        if not value:
            raise ValueError("no entries")
        return value

    def sources(self) -> List[str]:
        """Source tags in order of first appearance"""
        return list(dict.fromkeys(entry.source for entry in self.entries))


def load_grayscale(path: PathLike) -> GrayImage:
    """
    Decode a PNG or binary PGM into a GrayImage

    Args:
        path: image file

    Returns:
        GrayImage with the decoded 8-bit values

    Raises:
        OSError: file missing or unreadable
        ImageFormatError: format, mode or bit depth not supported
        ValidationError: image smaller than 2x2
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            fmt, mode = img.format, img.mode
            if fmt not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: format {fmt} is not supported (PNG or PGM only)")
            if fmt == "PPM" and mode != "L":
                raise ImageFormatError(f"{path}: PGM mode {mode} is not 8-bit grayscale")

            if mode == "L":
                pixels = np.asarray(img, dtype=np.uint8)
            elif mode == "LA":
                pixels = np.asarray(img, dtype=np.uint8)[:, :, 0]
            elif mode in ("RGB", "RGBA", "P"):
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
                luma = rgb @ np.array([0.299, 0.587, 0.114])
                pixels = np.floor(luma + 0.5).clip(0, 255).astype(np.uint8)
            else:
                raise ImageFormatError(f"{path}: mode {mode} (bit depth) is not supported, 8-bit only")
    except UnidentifiedImageError as e:
        raise ImageFormatError(f"{path}: unrecognized image format") from e

    return GrayImage(pixels)


def save_pgm(image: GrayImage, path: PathLike) -> Path:
    """Write a GrayImage as binary PGM (P5)"""
    path = Path(path)
    Image.fromarray(np.array(image.pixels, dtype=np.uint8)).save(path, format="PPM")
    return path


def quantize(img: GrayImage, levels: int) -> QuantizedImage:
    """
    Map 8-bit values onto `levels` gray levels: floor(raw * levels / 256)

    Args:
        img: source image
        levels: number of output levels, 2..256

    Returns:
        QuantizedImage with values in [0, levels)
    """
    if not isinstance(levels, (int, np.integer)) or not 2 <= levels <= 256:
        raise ValidationError(f"levels must be an integer in 2..256, got {levels}")
    raw = img.pixels.astype(np.int64)
    return QuantizedImage((raw * int(levels)) // 256, int(levels))


def load_manifest(path: PathLike) -> DatasetManifest:
    """
    Parse a `path,label,source` CSV manifest

    Image paths are resolved to absolute form, relative ones against the
    manifest's directory, so one image always has one spelling. Lines whose
    first character is '#' are comments. Image files are not checked here.

    Raises:
        ValidationError: bad header, bad row (with its line number) or no entries
    """
    path = Path(path)
    base = path.parent
    entries: List[ManifestEntry] = []

    with open(path, "r", encoding="utf-8-sig", newline="") as f:
        lines = [(number, line) for number, line in enumerate(f, start=1)
                 if line.strip() and not line.startswith("#")]

    if not lines:
        raise ValidationError(f"{path}: missing header {','.join(MANIFEST_HEADER)}")

    header_number, header_line = lines[0]
    header = tuple(cell.strip() for cell in next(csv.reader([header_line])))
    if header != MANIFEST_HEADER:
        raise ValidationError(f"header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}",
                              row=header_number)

    for number, line in lines[1:]:
        cells = next(csv.reader([line]))
        if len(cells) != 3:
            raise ValidationError(f"expected 3 columns, got {len(cells)}", row=number)
        raw_path, raw_label, source = (cell.strip() for cell in cells)
        try:
            label = int(raw_label)
        except ValueError:
            raise ValidationError(f"label {raw_label!r} is not an integer", row=number) from None
        if label not in SCORE_LABELS:
            raise ValidationError(f"label {label} is outside the 0-3 score scale", row=number)
        if not source:
            raise ValidationError("empty source tag", row=number)
        image_path = Path(raw_path)
        if not image_path.is_absolute():
            image_path = base / image_path
        image_path = image_path.resolve()
        entries.append(ManifestEntry(path=image_path, label=label, source=source))

    if not entries:
        raise ValidationError(f"{path}: no entries")

    logger.debug(f"[Imaging] manifest {path}: {len(entries)} entries")
    return DatasetManifest(entries=entries)


def write_manifest(entries: List[ManifestEntry], path: PathLike) -> Path:
    """Write entries as a manifest CSV, image paths relative to the manifest"""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for entry in entries:
            image_path = Path(entry.path).resolve()
            try:
                image_path = image_path.relative_to(base)
            except ValueError:
                pass
            writer.writerow([image_path.as_posix(), entry.label, entry.source])
    return path
