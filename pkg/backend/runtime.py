"""
Shared runtime for the TMA scoring pipeline

Everything the scoring modules and the CLI have in common lives here:
1. Environment loading (.env) and the YAML settings file
2. Logging through rich
3. Seed derivation so every random stream is reproducible
4. A small worker pool that keeps results in input order
"""

import hashlib
import logging
import os
import sys
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar, Union

import anyio
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator
from rich.console import Console
from rich.logging import RichHandler

# Fix Windows console encoding for Unicode characters
if sys.platform == 'win32':
    sys.stdout.reconfigure(encoding='utf-8', errors='replace')
    sys.stderr.reconfigure(encoding='utf-8', errors='replace')

# Load environment variables
load_dotenv()

from scoring.errors import ValidationError

CONFIG_DIR = Path(__file__).parent / "configs"
DEFAULT_CONFIG_PATH = CONFIG_DIR / "scoring_config.yaml"
DEFAULT_SYNTH_SPEC_PATH = CONFIG_DIR / "synth_benchmark.json"

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

# stderr only: stdout stays free for anything a caller pipes
console = Console(stderr=True)

T = TypeVar("T")
R = TypeVar("R")


class TextureSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    levels: int = Field(51, ge=2, le=256)
    direction: int = 45
    distance: int = Field(1, ge=1)
    normalize: bool = True
    pool_directions: bool = False

    @field_validator("direction")
    @classmethod
    def _known_direction(cls, value: int) -> int:
        if value not in (0, 45, 90, 135):
            raise ValueError("direction must be one of 0, 45, 90, 135")
        return value


class ForestSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trees: int = Field(100, ge=1)
    mtry: str = "sqrt"
    min_node_size: int = Field(1, ge=1)


class TransferSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: float = Field(0.10, ge=0.0, le=1.0)
    runs: int = Field(1, ge=1)
    split: float = Field(0.5, gt=0.0, lt=1.0)
    stratified: bool = False
    per_source: bool = True


class ScoringSettings(BaseModel):
    """Defaults for every subcommand; CLI flags override field by field"""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)
    log_level: str = "INFO"
    texture: TextureSettings = TextureSettings()
    forest: ForestSettings = ForestSettings()
    transfer: TransferSettings = TransferSettings()


def load_settings(config_path: Optional[Union[str, Path]] = None) -> ScoringSettings:
    """
    Load scoring settings from YAML, then apply environment overrides

    Args:
        config_path: explicit YAML path; falls back to $TMA_SCORING_CONFIG,
            then to configs/scoring_config.yaml

    Returns:
        validated ScoringSettings
    """
    path = Path(config_path or os.getenv("TMA_SCORING_CONFIG") or DEFAULT_CONFIG_PATH)
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ValidationError(f"settings file {path} must hold a mapping")

    if os.getenv("TMA_THREADS"):
        raw["threads"] = os.getenv("TMA_THREADS")
    if os.getenv("TMA_LOG_LEVEL"):
        raw["log_level"] = os.getenv("TMA_LOG_LEVEL")

    try:
        return ScoringSettings.model_validate(raw)
    except PydanticValidationError as e:
        raise ValidationError(f"invalid settings in {path}: {e}") from e


def configure_logging(level: str = "INFO") -> None:
    """Route all logging through a single rich handler on stderr"""
    level = level.upper()
    if level not in LOG_LEVELS:
        raise ValidationError(f"log level must be one of {', '.join(LOG_LEVELS)}")
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=level == "DEBUG")],
        force=True,
    )


def default_threads() -> int:
    env = os.getenv("TMA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def derive_seed(seed: int, *keys: Any) -> int:
    """
    Derive an independent 64-bit seed from a root seed and a key path

    derive_seed(7, "refit") and derive_seed(7, "split", 3) never collide in
    practice, and the result depends only on the arguments.
    """
    material = repr((int(seed),) + tuple(keys)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "little")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = 1) -> List[R]:
    """
    Apply fn to every item on up to `threads` worker threads

    Results come back in input order whatever the scheduling was.
    """
    items = list(items)
    threads = threads or default_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: Dict[int, R] = {}

    async def _run_all() -> None:
        limiter = anyio.CapacityLimiter(threads)

        async def _run_one(index: int, item: T) -> None:
            results[index] = await anyio.to_thread.run_sync(partial(fn, item), limiter=limiter)

        async with anyio.create_task_group() as tg:
            for index, item in enumerate(items):
                tg.start_soon(_run_one, index, item)

    anyio.run(_run_all)
    return [results[i] for i in range(len(items))]
