"""
Feature tables - extracted feature matrices and their CSV form

A features CSV has the columns path,label,source,f0..f{p-1}; `extract` writes
it and every later subcommand can read it in place of a manifest.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from runtime import parallel_map
from scoring.errors import ValidationError
from scoring.forest import LabeledInstance
from scoring.imaging import (MANIFEST_HEADER, SCORE_LABELS, DatasetManifest, ManifestEntry, load_grayscale,
                             load_manifest)
from scoring.texture import TextureExtractor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def feature_columns(p: int) -> List[str]:
    return [f"f{i}" for i in range(p)]


@dataclass(frozen=True)
class FeatureTable:
    paths: List[str]
    labels: np.ndarray
    sources: List[str]
    matrix: np.ndarray

    def __post_init__(self):
        n = len(self.paths)
        if not (len(self.labels) == len(self.sources) == self.matrix.shape[0] == n):
            raise ValidationError("feature table columns have different lengths")

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def n_features(self) -> int:
        return self.matrix.shape[1]

    def to_instances(self) -> List[LabeledInstance]:
        return [
            LabeledInstance(features=self.matrix[i], label=int(self.labels[i]),
                            source=self.sources[i], path=self.paths[i])
            for i in range(len(self))
        ]

    @classmethod
    def from_instances(cls, instances: Sequence[LabeledInstance]) -> "FeatureTable":
        if not instances:
            raise ValidationError("no instances")
        return cls(
            paths=[inst.path or "" for inst in instances],
            labels=np.array([inst.label for inst in instances], dtype=np.int64),
            sources=[inst.source for inst in instances],
            matrix=np.vstack([np.asarray(inst.features, dtype=np.float64) for inst in instances]),
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.matrix, columns=feature_columns(self.n_features))
        frame.insert(0, "source", self.sources)
        frame.insert(0, "label", self.labels)
        frame.insert(0, "path", self.paths)
        return frame

    def to_csv(self, path: PathLike) -> Path:
        """Write the table; floats use repr precision so a reload is exact"""
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path

    @classmethod
    def read_csv(cls, path: PathLike) -> "FeatureTable":
        path = Path(path)
        frame = pd.read_csv(path, dtype={"path": str, "label": str, "source": str}, keep_default_na=False,
                            float_precision="round_trip", encoding="utf-8-sig")
        if tuple(frame.columns[:3]) != MANIFEST_HEADER:
            raise ValidationError(f"{path}: features file must start with {','.join(MANIFEST_HEADER)}")
        columns = list(frame.columns[3:])
        if not columns or columns != feature_columns(len(columns)):
            raise ValidationError(f"{path}: feature columns must be f0..f{{p-1}}")
        if frame.empty:
            raise ValidationError(f"{path}: no entries")
        try:
            matrix = frame[columns].to_numpy(dtype=np.float64)
        except ValueError as e:
            raise ValidationError(f"{path}: non-numeric value ({e})") from e
        labels = _parse_labels(path, frame["label"])
        return cls(frame["path"].tolist(), labels, frame["source"].tolist(), matrix)


def _parse_labels(path: Path, column: pd.Series) -> np.ndarray:
    values = pd.to_numeric(column, errors="coerce").to_numpy(dtype=np.float64)
    for i, value in enumerate(values):
        # header is line 1
        if not np.isfinite(value) or value != np.floor(value):
            raise ValidationError(f"{path}: label {column.iloc[i]!r} is not an integer", row=i + 2)
        if int(value) not in SCORE_LABELS:
            raise ValidationError(f"{path}: label {int(value)} is outside the 0-3 score scale", row=i + 2)
    return values.astype(np.int64)


def extract_features(manifest: DatasetManifest, extractor: TextureExtractor,
                     threads: Optional[int] = 1) -> FeatureTable:
    """
    Load, quantize and featurize every manifest image, in manifest order

    Args:
        manifest: parsed dataset manifest
        extractor: texture settings
        threads: worker cap for image decoding and histogramming

    Returns:
        FeatureTable with one row per entry
    """
    def featurize(entry: ManifestEntry) -> np.ndarray:
        return extractor.extract(load_grayscale(entry.path))

    vectors = parallel_map(featurize, manifest.entries, threads)
    logger.info(f"[Texture] extracted {len(vectors)} vectors (p={extractor.n_features})")
    return FeatureTable(
        paths=[str(entry.path) for entry in manifest.entries],
        labels=np.array([entry.label for entry in manifest.entries], dtype=np.int64),
        sources=[entry.source for entry in manifest.entries],
        matrix=np.vstack(vectors),
    )


def is_feature_file(path: PathLike) -> bool:
    with open(path, "r", encoding="utf-8-sig") as f:
        for line in f:
            if line.strip() and not line.startswith("#"):
                return "f0" in (cell.strip() for cell in line.split(","))
    return False


def load_dataset(path: PathLike, extractor: TextureExtractor, threads: Optional[int] = 1) -> FeatureTable:
    """A features CSV is read as is; a manifest is featurized with `extractor`"""
    if is_feature_file(path):
        table = FeatureTable.read_csv(path)
        if table.n_features != extractor.n_features:
            logger.warning(f"[Texture] {path} holds p={table.n_features}, "
                           f"texture settings give p={extractor.n_features}; using the file")
        return table
    return extract_features(load_manifest(path), extractor, threads)
