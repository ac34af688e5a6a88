"""
Synthetic TMA corpora - blob textures whose staining grows with the score

Every image is smoothed Gaussian noise thresholded into stained blobs on a
lighter background. Each score 0-3 has a parameter tuple (blob density, stain
and background intensity, blob scale). An image draws a latent staining
strength s around its score and renders the tuple interpolated at s, so
higher scores give darker, denser staining.

Auxiliary sources keep a conforming fraction at the primary parameters and
move the rest by a shift delta, which makes a shifted image of score c look
like score c + delta.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator
from scipy.ndimage import gaussian_filter

from runtime import derive_seed, parallel_map
from scoring.errors import ValidationError
from scoring.imaging import SCORE_LABELS, GrayImage, ManifestEntry, save_pgm, write_manifest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TOP_SCORE = max(SCORE_LABELS)


class TextureParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    density: float = Field(..., gt=0.0, lt=1.0)
    stain: float = Field(..., ge=0.0, le=255.0)
    background: float = Field(..., ge=0.0, le=255.0)
    blob_sigma: float = Field(2.0, gt=0.0)


class SourceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    shift: float = Field(0.0, ge=0.0, allow_inf_nan=False)
    conforming: float = Field(1.0, ge=0.0, le=1.0)
    images_per_class: Optional[int] = Field(None, ge=0)

    @field_validator("name")
    @classmethod
    def _usable_name(cls, value: str) -> str:
        value = value.strip()
        if not value or any(ch in value for ch in "/\\,"):
            raise ValueError(f"source name {value!r} must be non-empty without '/', '\\' or ','")
        return value


def _default_classes() -> List[TextureParams]:
    return [
        TextureParams(density=0.15, stain=160.0, background=204.0),
        TextureParams(density=0.20, stain=152.0, background=203.0),
        TextureParams(density=0.25, stain=144.0, background=202.0),
        TextureParams(density=0.30, stain=136.0, background=201.0),
    ]


class SynthSpec(BaseModel):
    """Corpus description; the JSON form is documented in docs/SYNTH_SPEC.md"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    classes: List[TextureParams] = Field(default_factory=_default_classes)
    images_per_class: int = Field(40, ge=0)
    size: int = Field(64, ge=2)
    noise: float = Field(12.0, ge=0.0)
    strength_jitter: float = Field(0.25, ge=0.0)
    primary: str = "primary"
    sources: List[SourceSpec] = []
    seed: int = 0

    @field_validator("classes")
    @classmethod
    def _one_per_score(cls, value: List[TextureParams]) -> List[TextureParams]:
        if len(value) != len(SCORE_LABELS):
            raise ValueError(f"need one texture tuple per score ({len(SCORE_LABELS)}), got {len(value)}")
        return value

    def all_sources(self) -> List[SourceSpec]:
        """Primary first, then auxiliary sources in spec order"""
        primary = SourceSpec(name=self.primary, shift=0.0, conforming=1.0, images_per_class=self.images_per_class)
        names = [primary.name] + [s.name for s in self.sources]
        if len(set(names)) != len(names):
            raise ValidationError(f"source names must be unique: {names}")
        return [primary] + list(self.sources)


def load_spec(path: PathLike) -> SynthSpec:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return SynthSpec.model_validate_json(text)
    except PydanticValidationError as e:
        raise ValidationError(f"invalid synth spec {path}: {e}") from e


def shifted_center(score: int, shift: float) -> float:
    """Latent strength center of a shifted image; reflects below the top score"""
    center = score + shift
    if center > TOP_SCORE:
        center = score - shift
    return float(np.clip(center, 0.0, TOP_SCORE))


def texture_at(classes: List[TextureParams], strength: float) -> TextureParams:
    """Parameters linearly interpolated between the two scores around `strength`"""
    strength = float(np.clip(strength, 0.0, TOP_SCORE))
    low = int(np.floor(strength))
    high = min(low + 1, TOP_SCORE)
    w = strength - low
    a, b = classes[low], classes[high]
    return TextureParams(
        density=(1 - w) * a.density + w * b.density,
        stain=(1 - w) * a.stain + w * b.stain,
        background=(1 - w) * a.background + w * b.background,
        blob_sigma=(1 - w) * a.blob_sigma + w * b.blob_sigma,
    )


@dataclass(frozen=True)
class ImageJob:
    source: str
    score: int
    index: int
    center: float
    path: Path


@dataclass(frozen=True)
class GeneratedSource:
    name: str
    manifest_path: Path
    entries: List[ManifestEntry]


class SyntheticCorpusGenerator:
    """Renders a SynthSpec to PGM files plus one manifest per source"""

    def __init__(self, spec: SynthSpec, threads: Optional[int] = 1):
        self.spec = spec
        self.threads = threads

    def render(self, source: str, score: int, index: int, center: float) -> GrayImage:
        """One image; the pixels depend only on (seed, source, score, index, center)"""
        spec = self.spec
        rng = np.random.default_rng(derive_seed(spec.seed, source, score, index))
        strength = center + rng.normal(0.0, spec.strength_jitter) if spec.strength_jitter > 0 else center
        params = texture_at(spec.classes, strength)

        field = gaussian_filter(rng.standard_normal((spec.size, spec.size)), sigma=params.blob_sigma, mode="wrap")
        stained = field > np.quantile(field, 1.0 - params.density)
        pixels = np.where(stained, params.stain, params.background)
        if spec.noise > 0:
            pixels = pixels + rng.normal(0.0, spec.noise, pixels.shape)
        return GrayImage(np.clip(np.rint(pixels), 0, 255).astype(np.uint8))

    def plan(self, source: SourceSpec, out_dir: Path) -> List[ImageJob]:
        count = self.spec.images_per_class if source.images_per_class is None else source.images_per_class
        jobs: List[ImageJob] = []
        for score in SCORE_LABELS:
            # which images conform is itself seeded per (source, score)
            order = np.random.default_rng(derive_seed(self.spec.seed, source.name, score, "conforming")).permutation(count)
            n_conforming = int(round(source.conforming * count))
            conforming = set(order[:n_conforming].tolist())
            for index in range(count):
                center = float(score) if index in conforming else shifted_center(score, source.shift)
                path = out_dir / source.name / f"{source.name}_c{score}_{index:04d}.pgm"
                jobs.append(ImageJob(source.name, score, index, center, path))
        return jobs

    def generate(self, out_dir: PathLike) -> Dict[str, GeneratedSource]:
        """
        Write every source's images and manifest under out_dir

        Returns:
            source name -> GeneratedSource, primary first
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        results: Dict[str, GeneratedSource] = {}

        for source in self.spec.all_sources():
            jobs = self.plan(source, out_dir)
            if jobs:
                (out_dir / source.name).mkdir(parents=True, exist_ok=True)

            def write(job: ImageJob) -> Path:
                return save_pgm(self.render(job.source, job.score, job.index, job.center), job.path)

            parallel_map(write, jobs, self.threads)
            entries = [ManifestEntry(path=job.path, label=job.score, source=job.source) for job in jobs]
            manifest_path = write_manifest(entries, out_dir / f"{source.name}.csv")
            results[source.name] = GeneratedSource(source.name, manifest_path, entries)
            logger.info(f"[Synth] {source.name}: {len(entries)} images (shift={source.shift}, "
                        f"conforming={source.conforming})")

        (out_dir / "spec.json").write_text(self.spec.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return results


def generate(spec: SynthSpec, out_dir: PathLike, threads: Optional[int] = 1) -> Dict[str, GeneratedSource]:
    """Render a corpus; see SyntheticCorpusGenerator"""
    return SyntheticCorpusGenerator(spec, threads).generate(out_dir)


def summarize_sources(results: Dict[str, GeneratedSource]) -> List[Tuple[str, int, str]]:
    return [(name, len(r.entries), str(r.manifest_path)) for name, r in results.items()]
