"""
Texture - spatial histogram (gray-level co-occurrence) features

A spatial histogram counts ordered pixel pairs (p, q) where q sits at a fixed
offset from p. Offsets use (column, row) with rows growing downward, so 45
degrees at distance d puts q d columns right and d rows up from p.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Tuple

import numpy as np
from skimage.feature import graycomatrix

from scoring.errors import ValidationError
from scoring.imaging import GrayImage, QuantizedImage, quantize

logger = logging.getLogger(__name__)

# direction in degrees -> unit (dx, dy) step in (column, row)
DIRECTION_STEPS: Dict[int, Tuple[int, int]] = {
    0: (1, 0),
    45: (1, -1),
    90: (0, -1),
    135: (-1, -1),
}

DEFAULT_LEVELS = 51
DEFAULT_DIRECTION = 45
DEFAULT_DISTANCE = 1


def direction_offset(direction: int, distance: int) -> Tuple[int, int]:
    """(dx, dy) offset for a direction in degrees and a pixel distance"""
    if direction not in DIRECTION_STEPS:
        raise ValidationError(f"direction must be one of {sorted(DIRECTION_STEPS)}, got {direction}")
    if distance < 1:
        raise ValidationError(f"distance must be >= 1, got {distance}")
    step_x, step_y = DIRECTION_STEPS[direction]
    return step_x * distance, step_y * distance


@dataclass(frozen=True)
class SpatialHistogram:
    levels: int
    counts: np.ndarray
    direction: int
    distance: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def pair_count(width: int, height: int, offset: Tuple[int, int]) -> int:
    dx, dy = offset
    return max(0, width - abs(dx)) * max(0, height - abs(dy))


def offset_histogram(img: QuantizedImage, offset: Tuple[int, int]) -> np.ndarray:
    """
    G x G counts of ordered pairs (p, q) with q = p + offset

    Works for any integer offset, including negative components. Counting is
    skimage's graycomatrix, which takes a distance and an angle whose row step
    points down; upward offsets count the reversed offset and transpose.
    """
    dx, dy = offset
    height, width = img.pixels.shape
    if abs(dx) >= width or abs(dy) >= height:
        raise ValidationError(
            f"offset ({dx}, {dy}) leaves no pixel pairs in a {width}x{height} image")
    if dy < 0 or (dy == 0 and dx < 0):
        return offset_histogram(img, (-dx, -dy)).T

    pixels = img.pixels.astype(np.uint8 if img.levels <= 256 else np.uint16)
    counts = graycomatrix(pixels, distances=[np.hypot(dx, dy)],
                          angles=[np.arctan2(dy, dx)], levels=img.levels, symmetric=False)
    return counts[:, :, 0, 0].astype(np.int64)


def spatial_histogram(img: QuantizedImage, direction: int = DEFAULT_DIRECTION,
                      distance: int = DEFAULT_DISTANCE) -> SpatialHistogram:
    """
    Spatial histogram of a quantized image for one direction and distance

    Raises:
        ValidationError: unknown direction, or offset too large for the image
    """
    counts = offset_histogram(img, direction_offset(direction, distance))
    counts.setflags(write=False)
    return SpatialHistogram(levels=img.levels, counts=counts, direction=direction, distance=distance)


def pooled_histogram(img: QuantizedImage, distance: int = DEFAULT_DISTANCE,
                     directions: Iterable[int] = tuple(DIRECTION_STEPS)) -> np.ndarray:
    """Sum of the spatial histograms over several directions at one distance"""
    directions = tuple(directions)
    total = np.zeros((img.levels, img.levels), dtype=np.int64)
    for direction in directions:
        total += offset_histogram(img, direction_offset(direction, distance))
    return total


def to_feature_vector(h: SpatialHistogram, normalize: bool = True) -> np.ndarray:
    """
    Row-major flattening of the histogram, optionally divided by the pair total

    Returns:
        float64 vector of length levels**2
    """
    return _flatten(h.counts, normalize)


def _flatten(counts: np.ndarray, normalize: bool) -> np.ndarray:
    values = np.asarray(counts, dtype=np.float64).ravel()
    if normalize:
        total = values.sum()
        if total > 0:
            values = values / total
    values.setflags(write=False)
    return values


class TextureExtractor:
    """
    Turns gray images into classifier feature vectors

    Settings mirror the texture section of scoring_config.yaml: quantization
    levels, direction, distance, normalization and optional direction pooling.
    """

    def __init__(self, levels: int = DEFAULT_LEVELS, direction: int = DEFAULT_DIRECTION,
                 distance: int = DEFAULT_DISTANCE, normalize: bool = True,
                 pool_directions: bool = False):
        if not 2 <= levels <= 256:
            raise ValidationError(f"levels must be in 2..256, got {levels}")
        direction_offset(direction, distance)
        self.levels = levels
        self.direction = direction
        self.distance = distance
        self.normalize = normalize
        self.pool_directions = pool_directions

    @property
    def n_features(self) -> int:
        return self.levels * self.levels

    def histogram(self, image: GrayImage) -> np.ndarray:
        quantized = quantize(image, self.levels)
        if self.pool_directions:
            return pooled_histogram(quantized, self.distance)
        return spatial_histogram(quantized, self.direction, self.distance).counts

    def extract(self, image: GrayImage) -> np.ndarray:
        """Feature vector of one image"""
        return _flatten(self.histogram(image), self.normalize)

    def describe(self) -> dict:
        return {
            "levels": self.levels,
            "direction": "pooled" if self.pool_directions else self.direction,
            "distance": self.distance,
            "normalize": self.normalize,
            "p": self.n_features,
        }
