import os
import sys

import numpy as np
import pytest

# Add backend directory to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from scoring.forest import LabeledInstance  # noqa: E402
from scoring.imaging import QuantizedImage  # noqa: E402
from scoring.synthgen import SourceSpec, SynthSpec, generate  # noqa: E402

# 4-level worked example; rows top to bottom
TOY_PIXELS = [
    [0, 0, 1, 1],
    [0, 1, 1, 1],
    [0, 2, 2, 2],
    [2, 2, 3, 3],
]

# its 45 degree, distance 1 spatial histogram
TOY_HISTOGRAM_45 = [
    [1, 1, 0, 0],
    [0, 2, 0, 0],
    [0, 2, 2, 0],
    [0, 0, 1, 0],
]


@pytest.fixture
def toy_image() -> QuantizedImage:
    return QuantizedImage(np.array(TOY_PIXELS), 4)


@pytest.fixture
def make_clusters():
    """Factory for labeled Gaussian clusters, one center per label"""

    def _make(seed: int, n_per_class: int = 10, p: int = 4, labels=(0, 1, 2, 3),
              spread: float = 1.0, separation: float = 3.0, prefix: str = "img", source: str = "primary"):
        rng = np.random.default_rng(seed)
        centers = {label: rng.normal(0.0, separation, p) for label in labels}
        data = []
        for label in labels:
            for k in range(n_per_class):
                data.append(LabeledInstance(
                    features=centers[label] + rng.normal(0.0, spread, p),
                    label=label,
                    source=source,
                    path=f"{prefix}/{label}_{k}",
                ))
        return data

    return _make


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Tiny rendered corpus: primary plus one shifted auxiliary source"""
    spec = SynthSpec(
        images_per_class=4,
        size=16,
        sources=[SourceSpec(name="aux_a", shift=1.0, conforming=0.5, images_per_class=3)],
        seed=3,
    )
    out = tmp_path_factory.mktemp("corpus")
    results = generate(spec, out)
    return {name: result.manifest_path for name, result in results.items()}
