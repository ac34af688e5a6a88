"""
Transfer - confidence-gated instance transfer from auxiliary sources

Flow of one scoring run:
1. Fit the gating forest M0 on the training split
2. Gate every auxiliary set with M0: keep instances whose predicted label is
   their given label with vote margin >= beta
3. Refit on train + transferred instances
4. Score both forests on the test split, plus the optional comparison arms
   (one source at a time, and all auxiliary data pooled without gating)
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from runtime import derive_seed, parallel_map
from scoring.errors import ValidationError
from scoring.evaluation import accuracy, separation_ratio
from scoring.forest import Forest, ForestParams, LabeledInstance, margins, resolve_mtry, stack_instances, train_forest

logger = logging.getLogger(__name__)

AuxSets = Mapping[str, Sequence[LabeledInstance]]


class TransferConfig(BaseModel):
    """Everything one transfer-score invocation needs besides the data"""

    model_config = ConfigDict(frozen=True)

    beta: float = Field(0.10, ge=0.0, le=1.0)
    trees: int = Field(100, ge=1)
    mtry: Union[int, str] = "sqrt"
    seed: int = 0
    min_node_size: int = Field(1, ge=1)
    aux_sources: List[str] = []
    split: float = Field(0.5, gt=0.0, lt=1.0)
    stratified: bool = False
    pooled_baseline: bool = False
    per_source: bool = True
    threads: Optional[int] = Field(1, ge=1)
    representation: str = "normalized"

    def forest_params(self, p: int, seed: int) -> ForestParams:
        return ForestParams(trees=self.trees, mtry=resolve_mtry(self.mtry, p), seed=seed,
                            min_node_size=self.min_node_size)


@dataclass(frozen=True)
class TransferableSet:
    instances: Tuple[LabeledInstance, ...]
    per_source: Dict[str, int]
    beta: float
    trees: int

    def __len__(self) -> int:
        return len(self.instances)

    def verify(self, model: Forest) -> List[int]:
        """
        Re-run the gate against `model`

        Returns:
            indices of instances that no longer pass; empty when the set is sound
        """
        if not self.instances:
            return []
        X, y = stack_instances(self.instances)
        votes = model.vote_matrix(X)
        passes = (np.argmax(votes, axis=1) == y) & (margins(votes, self.trees) >= self.beta)
        return [int(i) for i in np.nonzero(~passes)[0]]


def _gate(model: Forest, X: np.ndarray, y: np.ndarray, T: int, beta: float) -> np.ndarray:
    votes = model.vote_matrix(X)
    return (np.argmax(votes, axis=1) == y) & (margins(votes, T) >= beta)


def tma_transfer(model: Forest, aux: Sequence[LabeledInstance], T: int, beta: float) -> TransferableSet:
    """
    Select the auxiliary instances the gating model agrees with confidently

    Args:
        model: gating forest trained with T trees
        aux: candidate instances, left untouched
        T: tree count of `model`
        beta: inclusive confidence threshold in [0, 1]

    Returns:
        TransferableSet in input order
    """
    if T != model.n_trees:
        raise ValidationError(f"T={T} but the gating model has {model.n_trees} trees")
    if not 0.0 <= beta <= 1.0:
        raise ValidationError(f"beta must lie in [0, 1], got {beta}")
    if not aux:
        return TransferableSet((), {}, beta, T)

    X, y = stack_instances(aux)
    keep = _gate(model, X, y, T, beta)
    chosen = tuple(inst for inst, ok in zip(aux, keep) if ok)
    per_source: Dict[str, int] = OrderedDict()
    for inst in chosen:
        per_source[inst.source] = per_source.get(inst.source, 0) + 1
    return TransferableSet(chosen, dict(per_source), beta, T)


class ScoreReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    run: int = 0
    seed: int
    split_seed: Optional[int] = None
    refit_seed: int
    mtry: int
    n_train: int
    n_test: int
    accuracy_with_transfer: float = Field(..., ge=0.0, le=1.0)
    accuracy_without_transfer: float = Field(..., ge=0.0, le=1.0)
    accuracy_pooled: Optional[float] = Field(None, ge=0.0, le=1.0)
    accuracy_by_source: Dict[str, float] = {}
    accuracy_pooled_by_source: Dict[str, float] = {}
    transferred: Dict[str, int]
    transferred_paths: Dict[str, List[str]] = {}
    aux_sizes: Dict[str, int]
    rho_before: Optional[float] = None
    rho_after: Optional[float] = None
    degenerate: bool = False

    @model_validator(mode="after")
    def _transferred_within_aux(self) -> "ScoreReport":
        for name, count in self.transferred.items():
            if count > self.aux_sizes.get(name, 0):
                raise ValueError(f"{count} transferred from {name}, which holds {self.aux_sizes.get(name, 0)}")
            listed = self.transferred_paths.get(name)
            if listed is not None and len(listed) != count:
                raise ValueError(f"{name}: {count} transferred but {len(listed)} paths listed")
        return self


def image_identity(path: str) -> str:
    """One spelling per image file, so `a/../b.pgm` and `b.pgm` compare equal"""
    return str(Path(path).resolve())


def _paths(data: Sequence[LabeledInstance]) -> set:
    return {image_identity(inst.path) for inst in data if inst.path}


def _rho(data: Sequence[LabeledInstance], representation: str) -> Optional[float]:
    if len({inst.label for inst in data}) < 2:
        return None
    return separation_ratio(data, representation).rho


class TransferScorer:
    """
    Runs the gate-and-refit procedure for one TransferConfig

    Both M0 and the refit forest grow from derive_seed(seed, "refit"), so an
    empty transferable set gives two identical forests.
    """

    def __init__(self, config: TransferConfig):
        self.config = config

    def _ordered_aux(self, aux_sets: AuxSets, excluded: set) -> "OrderedDict[str, List[LabeledInstance]]":
        names = list(self.config.aux_sources) or list(aux_sets)
        missing = [name for name in names if name not in aux_sets]
        if missing:
            raise ValidationError(f"auxiliary sources not provided: {', '.join(missing)}")

        seen = set(excluded)
        ordered: "OrderedDict[str, List[LabeledInstance]]" = OrderedDict()
        for name in names:
            kept = []
            for inst in aux_sets[name]:
                key = image_identity(inst.path) if inst.path else None
                if key and key in seen:
                    logger.debug(f"[Transfer] {inst.path} already seen, skipped in {name}")
                    continue
                if key:
                    seen.add(key)
                kept.append(inst)
            ordered[name] = kept
        return ordered

    def score(self, train: Sequence[LabeledInstance], aux_sets: AuxSets, test: Sequence[LabeledInstance],
              run: int = 0, split_seed: Optional[int] = None, threads: Optional[int] = None) -> ScoreReport:
        config = self.config
        threads = config.threads if threads is None else threads
        if not train or not test:
            raise ValidationError("train and test sets must be non-empty")
        train_paths, test_paths = _paths(train), _paths(test)
        if train_paths & test_paths:
            raise ValidationError(f"{len(train_paths & test_paths)} images appear in both train and test")
        for name, data in aux_sets.items():
            if _paths(data) & test_paths:
                raise ValidationError(f"auxiliary source {name} shares images with the test set")

        X_train, _ = stack_instances(train)
        X_test, y_test = stack_instances(test)
        if X_test.shape[1] != X_train.shape[1]:
            raise ValidationError(f"test vectors have p={X_test.shape[1]}, train p={X_train.shape[1]}")

        refit_seed = derive_seed(config.seed, "refit")
        params = config.forest_params(X_train.shape[1], refit_seed)

        def fit(data: Sequence[LabeledInstance]) -> Forest:
            return train_forest(data, params, threads)

        def test_accuracy(model: Forest) -> float:
            return accuracy(model.predict(X_test), y_test)

        gating = fit(train)
        aux = self._ordered_aux(aux_sets, train_paths)
        transferable: Dict[str, TransferableSet] = OrderedDict(
            (name, tma_transfer(gating, data, params.trees, config.beta)) for name, data in aux.items())
        gained = [inst for t in transferable.values() for inst in t.instances]

        if logger.isEnabledFor(logging.DEBUG):
            for name, t in transferable.items():
                failed = t.verify(gating)
                if failed:
                    raise ValidationError(f"gate audit failed for {len(failed)} instances of {name}")

        refit = fit(list(train) + gained) if gained else gating
        base_accuracy = test_accuracy(gating)

        by_source: Dict[str, float] = {}
        if config.per_source:
            for name, t in transferable.items():
                by_source[name] = test_accuracy(fit(list(train) + list(t.instances))) if len(t) else base_accuracy

        pooled = None
        pooled_by_source: Dict[str, float] = {}
        if config.pooled_baseline:
            everything = [inst for data in aux.values() for inst in data]
            pooled = test_accuracy(fit(list(train) + everything)) if everything else base_accuracy
            if config.per_source:
                for name, data in aux.items():
                    pooled_by_source[name] = test_accuracy(fit(list(train) + data)) if data else base_accuracy

        report = ScoreReport(
            run=run,
            seed=config.seed,
            split_seed=split_seed,
            refit_seed=refit_seed,
            mtry=params.mtry,
            n_train=len(train),
            n_test=len(test),
            accuracy_with_transfer=test_accuracy(refit),
            accuracy_without_transfer=base_accuracy,
            accuracy_pooled=pooled,
            accuracy_by_source=by_source,
            accuracy_pooled_by_source=pooled_by_source,
            transferred={name: len(t) for name, t in transferable.items()},
            transferred_paths={name: [inst.path or "" for inst in t.instances]
                               for name, t in transferable.items()},
            aux_sizes={name: len(data) for name, data in aux.items()},
            rho_before=_rho(train, config.representation),
            rho_after=_rho(list(train) + gained, config.representation),
            degenerate=gating.degenerate,
        )
        logger.info(f"[Transfer] run {run}: {len(gained)} transferred, accuracy "
                    f"{report.accuracy_without_transfer:.4f} -> {report.accuracy_with_transfer:.4f}")
        return report


def tma_score(train: Sequence[LabeledInstance], aux_sets: AuxSets, test: Sequence[LabeledInstance],
              config: TransferConfig) -> ScoreReport:
    """Gate, refit and score once; see TransferScorer"""
    return TransferScorer(config).score(train, aux_sets, test)


def split_primary(data: Sequence[LabeledInstance], fraction: float, seed: int,
                  stratified: bool = False) -> Tuple[List[LabeledInstance], List[LabeledInstance]]:
    """
    Seeded train/test split of the primary set

    Uniform: floor(n * fraction) instances go to train. Stratified: the same
    rule per label.
    """
    n = len(data)
    if n < 2:
        raise ValidationError(f"cannot split {n} instance(s) into train and test")
    rng = np.random.default_rng(seed)
    labels = np.array([inst.label for inst in data])

    if stratified:
        train_idx: List[int] = []
        for label in np.unique(labels):
            members = np.nonzero(labels == label)[0]
            members = members[rng.permutation(len(members))]
            train_idx.extend(members[:int(len(members) * fraction)].tolist())
        chosen = np.zeros(n, dtype=bool)
        chosen[train_idx] = True
    else:
        order = rng.permutation(n)
        chosen = np.zeros(n, dtype=bool)
        chosen[order[:min(n - 1, max(1, int(n * fraction)))]] = True

    train = [inst for inst, c in zip(data, chosen) if c]
    test = [inst for inst, c in zip(data, chosen) if not c]
    if not train or not test:
        raise ValidationError("split left train or test empty")
    return train, test


class ArmSummary(BaseModel):
    mean: Optional[float]
    std: Optional[float]


class ExperimentSummary(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    runs: int
    accuracy_with_transfer: ArmSummary
    accuracy_without_transfer: ArmSummary
    accuracy_pooled: Optional[ArmSummary] = None
    accuracy_by_source: Dict[str, ArmSummary] = {}
    accuracy_pooled_by_source: Dict[str, ArmSummary] = {}
    rho_before: ArmSummary
    rho_after: ArmSummary
    transferred_mean: Dict[str, float]
    transfer_wins: int
    transfer_losses: int
    transfer_ties: int
    pooled_wins: Optional[int] = None
    pooled_losses: Optional[int] = None
    pooled_ties: Optional[int] = None


class ExperimentReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    mtry: Union[int, str]
    summary: ExperimentSummary
    runs: List[ScoreReport]


def _arm(values: Sequence[Optional[float]]) -> ArmSummary:
    values = [v for v in values if v is not None]
    if not values:
        return ArmSummary(mean=None, std=None)
    array = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        return ArmSummary(mean=float("inf"), std=None)
    std = float(np.std(array, ddof=1)) if len(array) > 1 else 0.0
    return ArmSummary(mean=float(np.mean(array)), std=std)


def _tally(arm: Sequence[float], baseline: Sequence[float]) -> Tuple[int, int, int]:
    """Per-run (wins, losses, ties) of `arm` against `baseline`"""
    pairs = list(zip(arm, baseline))
    return (sum(a > b for a, b in pairs), sum(a < b for a, b in pairs), sum(a == b for a, b in pairs))


def summarize(reports: Sequence[ScoreReport]) -> ExperimentSummary:
    with_t = [r.accuracy_with_transfer for r in reports]
    without_t = [r.accuracy_without_transfer for r in reports]
    first = reports[0]
    wins, losses, ties = _tally(with_t, without_t)

    pooled_arm: Optional[ArmSummary] = None
    pooled_tally: Tuple[Optional[int], Optional[int], Optional[int]] = (None, None, None)
    if first.accuracy_pooled is not None:
        pooled = [r.accuracy_pooled for r in reports]
        pooled_arm = _arm(pooled)
        pooled_tally = _tally(pooled, without_t)

    return ExperimentSummary(
        runs=len(reports),
        accuracy_with_transfer=_arm(with_t),
        accuracy_without_transfer=_arm(without_t),
        accuracy_pooled=pooled_arm,
        accuracy_by_source={name: _arm([r.accuracy_by_source[name] for r in reports])
                            for name in first.accuracy_by_source},
        accuracy_pooled_by_source={name: _arm([r.accuracy_pooled_by_source[name] for r in reports])
                                   for name in first.accuracy_pooled_by_source},
        rho_before=_arm([r.rho_before for r in reports]),
        rho_after=_arm([r.rho_after for r in reports]),
        transferred_mean={name: float(np.mean([r.transferred[name] for r in reports]))
                          for name in first.transferred},
        transfer_wins=wins,
        transfer_losses=losses,
        transfer_ties=ties,
        pooled_wins=pooled_tally[0],
        pooled_losses=pooled_tally[1],
        pooled_ties=pooled_tally[2],
    )


def run_split(primary: Sequence[LabeledInstance], config: TransferConfig,
              r: int) -> Tuple[List[LabeledInstance], List[LabeledInstance], int]:
    """Train/test split of run r and the seed it was drawn with"""
    split_seed = derive_seed(config.seed, "split", r)
    train, test = split_primary(primary, config.split, split_seed, config.stratified)
    return train, test, split_seed


def run_experiment(primary: Sequence[LabeledInstance], aux_sets: AuxSets, config: TransferConfig,
                   runs: int = 1) -> ExperimentReport:
    """
    Repeat split -> tma_score `runs` times and aggregate

    Run r splits with derive_seed(seed, "split", r) and grows its forests from
    derive_seed(seed, "run", r). Runs go to worker threads when there are
    several; each run then trains its trees serially.
    """
    if runs < 1:
        raise ValidationError(f"runs must be >= 1, got {runs}")

    def one_run(r: int) -> ScoreReport:
        train, test, split_seed = run_split(primary, config, r)
        run_config = config.model_copy(update={"seed": derive_seed(config.seed, "run", r)})
        inner_threads = 1 if runs > 1 else config.threads
        return TransferScorer(run_config).score(train, aux_sets, test, run=r, split_seed=split_seed,
                                                threads=inner_threads)

    reports = parallel_map(one_run, range(runs), config.threads if runs > 1 else 1)
    return ExperimentReport(mtry=config.mtry, summary=summarize(reports), runs=reports)


def run_fixed_split(train: Sequence[LabeledInstance], aux_sets: AuxSets, test: Sequence[LabeledInstance],
                    config: TransferConfig) -> ExperimentReport:
    """Single scoring run on a caller-supplied train/test pair"""
    report = TransferScorer(config).score(train, aux_sets, test)
    return ExperimentReport(mtry=config.mtry, summary=summarize([report]), runs=[report])


def transferred_training_set(train: Sequence[LabeledInstance], aux_sets: AuxSets,
                             report: ScoreReport) -> List[LabeledInstance]:
    """
    Rebuild the enlarged training set of one run from its report

    Args:
        train: training split the report was scored with
        aux_sets: the auxiliary sets of that run
        report: ScoreReport whose transferred_paths name the gained images

    Returns:
        train followed by the transferred instances, source by source
    """
    enlarged = list(train)
    for name, paths in report.transferred_paths.items():
        wanted = {image_identity(p) for p in paths if p}
        gained = [inst for inst in aux_sets.get(name, ()) if inst.path and image_identity(inst.path) in wanted]
        if len(gained) < len(wanted):
            raise ValidationError(f"auxiliary source {name} lacks {len(wanted) - len(gained)} transferred images")
        enlarged.extend(gained[:len(wanted)])
    return enlarged
