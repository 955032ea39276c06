"""Experiment configuration and the end-to-end pipeline stages.

A configuration is a TOML document with the sections below; every key has a
default and unknown keys are rejected.  Each stage draws its randomness from
a seed derived from the run seed and the stage name, so changing e.g. the
attack seed leaves the federated training untouched.
"""

from __future__ import annotations

import dataclasses
import itertools
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import attack as atk
from . import nn
from .federation import FederationConfig, PosteriorOracle, run_training
from .graph import DataSplit, Graph, Partition, generate_sbm, load_graph, make_split, partition_graph
from .manipulation import FeatureManipulator, ManipulatedDataset, ManipulationConfig
from .metrics import (
    DefenseSetting,
    MetricReport,
    accuracy,
    auc_cus,
    full_report,
    histogram_l1,
    homophily_histogram,
    score_reconstruction,
)


class ConfigError(ValueError):
    pass


# --- configuration --------------------------------------------------------

@dataclass(frozen=True)
class DatasetSection:
    source: str = "sbm"
    nodes_path: str = ""
    edges_path: str = ""
    num_blocks: int = 4
    nodes_per_block: int = 125
    p_in: float = 0.2
    p_out: float = 0.02
    feature_dim: int = 8
    feature_shift: float = 1.0
    train_frac: float = 0.6
    val_frac: float = 0.2

    def check(self):
        if self.source not in ("sbm", "files"):
            raise ConfigError("dataset.source must be 'sbm' or 'files'")
        if self.source == "files" and not (self.nodes_path and self.edges_path):
            raise ConfigError("dataset.nodes_path and dataset.edges_path are required for source='files'")


@dataclass(frozen=True)
class FederationSection:
    k: int = 3
    rounds: int = 100
    local_epochs: int = 1
    server_arch: str = "GCN"
    layers: int = 2
    hidden: int = 16
    heads: int = 4
    overlap: float = 0.0
    malicious_index: int = 0
    lr: float = 0.01

    def check(self):
        if self.k < 2:
            raise ConfigError("federation.k must be >= 2")
        if not 0 <= self.malicious_index < self.k:
            raise ConfigError("federation.malicious_index must lie in 0..k-1")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("federation.overlap must lie in [0, 1)")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("federation.rounds and federation.local_epochs must be >= 1")

    def arch(self, kind=None) -> nn.ModelArch:
        return nn.ModelArch(kind or self.server_arch, self.layers, self.hidden, self.heads)


@dataclass(frozen=True)
class ManipulationSection:
    enabled: bool = True
    malicious_arch: str = ""
    alpha: float = 1.0
    beta: float = 0.01
    lam: float = 1.0
    epsilon: float = 0.1
    eta: float = 0.01
    steps: int = 100
    negative_sample_ratio: float = 1.0
    smoothing: str = "uniform"
    start_round: int = 1
    refresh_every: int = 1
    surrogate_epochs: int = 100

    def check(self):
        if self.refresh_every < 1 or self.start_round < 0:
            raise ConfigError("manipulation.refresh_every must be >= 1 and start_round >= 0")

    def pgd_config(self, seed: int) -> ManipulationConfig:
        return ManipulationConfig(self.alpha, self.beta, self.lam, self.epsilon, self.eta, self.steps,
                                  self.negative_sample_ratio, self.smoothing, seed)


@dataclass(frozen=True)
class AttackSection:
    variant: str = "mlp"
    epochs: int = 100
    negative_ratio: float = 1.0
    lr: float = 0.001
    batch_size: int = 128
    threshold: float = 0.5
    seed: int = -1  # -1: follow the run seed
    entropy_summary: bool = False

    def check(self):
        if self.variant not in atk.VARIANTS:
            raise ConfigError(f"attack.variant must be one of {atk.VARIANTS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("attack.epochs must be >= 0 and attack.batch_size >= 1")


@dataclass(frozen=True)
class DefenseSection:
    kind: str = "none"
    strength: float = 0.0
    renormalize: bool = True

    def setting(self) -> DefenseSetting:
        return DefenseSetting(self.kind, self.strength, self.renormalize)


@dataclass(frozen=True)
class EvaluationSection:
    target: str = "all"
    seeds: tuple = (0, 1, 2)
    similarity: str = "cosine"
    histogram_mode: str = "posteriors"
    pairs: str = "balanced"  # or "all": every pair in the target set

    def check(self):
        if self.target not in ("all", "benign"):
            raise ConfigError("evaluation.target must be 'all' or 'benign'")
        if not self.seeds:
            raise ConfigError("evaluation.seeds must not be empty")
        if self.histogram_mode not in ("features", "posteriors"):
            raise ConfigError("evaluation.histogram_mode must be 'features' or 'posteriors'")
        if self.pairs not in ("balanced", "all"):
            raise ConfigError("evaluation.pairs must be 'balanced' or 'all'")


@dataclass(frozen=True)
class OutputSection:
    root: str = ""


@dataclass(frozen=True)
class SweepSection:
    grid: tuple = ()  # ((dotted_key, (values...)), ...)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    federation: FederationSection = field(default_factory=FederationSection)
    manipulation: ManipulationSection = field(default_factory=ManipulationSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self) -> "ExperimentConfig":
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "check"):
                section.check()
        try:
            self.federation.arch()
            if self.manipulation.malicious_arch:
                self.federation.arch(self.manipulation.malicious_arch)
            self.manipulation.pgd_config(0)
            self.defense.setting()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self, include_output: bool = True) -> dict:
        data = asdict(self)
        data["evaluation"]["seeds"] = list(self.evaluation.seeds)
        data["sweep"] = {"grid": {k: list(v) for k, v in self.sweep.grid}}
        if not include_output:
            data.pop("output")
        return data

    def fingerprint_dict(self) -> dict:
        """Everything that influences results; output location is excluded."""
        return self.to_dict(include_output=False)


_SECTION_TYPES = {
    "dataset": DatasetSection, "federation": FederationSection, "manipulation": ManipulationSection,
    "attack": AttackSection, "defense": DefenseSection, "evaluation": EvaluationSection,
    "output": OutputSection, "sweep": SweepSection,
}


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of integers")
        return tuple(value)
    raise ConfigError(f"cannot set {where}")


def _build_section(name: str, values: dict):
    cls = _SECTION_TYPES[name]
    if name == "sweep":
        unknown = set(values) - {"grid"}
        if unknown:
            raise ConfigError(f"unknown key(s) in [sweep]: {sorted(unknown)}")
        grid = values.get("grid", {})
        if not isinstance(grid, dict):
            raise ConfigError("sweep.grid must be a table of dotted keys to value lists")
        items = []
        for key, vals in grid.items():
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"sweep.grid.{key} must be a non-empty list")
            items.append((key, tuple(vals)))
        return SweepSection(tuple(items))
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    kwargs = {k: _coerce(name, k, v, getattr(defaults, k)) for k, v in values.items()}
    return cls(**kwargs)


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Build and validate a config from nested dicts; unknown sections or keys are errors."""
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    sections = {}
    for name, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(name, values)
    cfg = ExperimentConfig(**sections)
    if base_dir is not None and cfg.dataset.source == "files":
        ds = cfg.dataset
        resolve = lambda p: str((base_dir / p).resolve()) if p and not Path(p).is_absolute() else p
        cfg = replace(cfg, dataset=replace(ds, nodes_path=resolve(ds.nodes_path), edges_path=resolve(ds.edges_path)))
    return cfg.validate()


def parse_value(text: str):
    """A TOML scalar/array if it parses as one, else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides to a nested config dict (copied)."""
    out = {k: dict(v) for k, v in data.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        set_dotted(out, key.strip(), parse_value(raw.strip()))
    return out


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) != 2:
        raise ConfigError(f"expected section.key, got {key!r}")
    data.setdefault(parts[0], {})[parts[1]] = value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data, base = {}, None
    if path is not None:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent
    return config_from_dict(apply_overrides(data, overrides), base)


def with_values(cfg: ExperimentConfig, assignments: dict) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-key assignments applied (used by sweeps)."""
    data = cfg.to_dict()
    for key, value in assignments.items():
        set_dotted(data, key, value)
    return config_from_dict(data)


def grid_cells(cfg: ExperimentConfig) -> list[dict]:
    if not cfg.sweep.grid:
        raise ConfigError("sweep grid is empty")
    keys = [k for k, _ in cfg.sweep.grid]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in cfg.sweep.grid))]


# --- seeds ----------------------------------------------------------------

STAGES = ("dataset", "partition", "split", "model", "manipulation", "attack", "evaluation", "defense", "stealth")


def stage_seed(run_seed: int, stage: str) -> int:
    """Independent 32-bit seed for one pipeline stage of one run."""
    return int(np.random.SeedSequence([int(run_seed), STAGES.index(stage)]).generate_state(1)[0])


# --- stages ---------------------------------------------------------------

@dataclass
class PreparedData:
    graph: Graph
    partition: Partition
    split: DataSplit


def prepare(cfg: ExperimentConfig, seed: int) -> PreparedData:
    ds, fed = cfg.dataset, cfg.federation
    if ds.source == "files":
        g = load_graph(ds.nodes_path, ds.edges_path)
    else:
        g = generate_sbm(ds.num_blocks, ds.nodes_per_block, ds.p_in, ds.p_out, ds.feature_dim, ds.feature_shift,
                         stage_seed(seed, "dataset"))
    part = partition_graph(g, fed.k, fed.overlap, fed.malicious_index, stage_seed(seed, "partition"))
    split = make_split(g, ds.train_frac, ds.val_frac, stage_seed(seed, "split"))
    return PreparedData(g, part, split)


@dataclass
class TrainOutcome:
    state: object
    manipulated: ManipulatedDataset | None
    test_acc: float


def train(cfg: ExperimentConfig, data: PreparedData, seed: int, progress=None) -> TrainOutcome:
    fed, man = cfg.federation, cfg.manipulation
    fconf = FederationConfig(fed.rounds, fed.local_epochs, fed.arch(), fed.lr, stage_seed(seed, "model"))
    hook = None
    if man.enabled:
        mal_kind = man.malicious_arch or fed.server_arch
        white_box = nn.canonical_arch(mal_kind) == nn.canonical_arch(fed.server_arch)
        train_mask = data.split.mask("train")[data.partition.malicious_nodes]
        hook = FeatureManipulator(
            man.pgd_config(stage_seed(seed, "manipulation")),
            np.flatnonzero(train_mask),
            surrogate_arch=None if white_box else fed.arch(mal_kind),
            start_round=man.start_round,
            refresh_every=man.refresh_every,
            surrogate_epochs=man.surrogate_epochs,
            lr=fed.lr,
        )
    state = run_training(fconf, data.graph, data.partition, data.split, hook, progress)
    post = nn.predict(state.global_model, data.graph)
    test_acc = accuracy(post, data.graph.labels, data.split.test)
    return TrainOutcome(state, hook.latest if hook is not None else None, test_acc)


def manipulated_features(data: PreparedData, manipulated: ManipulatedDataset | None) -> np.ndarray:
    sub = data.partition.malicious_subgraph
    return sub.features if manipulated is None else manipulated.features


def stealth(cfg: ExperimentConfig, data: PreparedData, global_model: nn.ModelState, x_after, seed: int) -> dict:
    """Homophily diagnostics on the malicious subgraph, clean vs manipulated features.

    AUC-CUS uses the final global model's posteriors on the subgraph; the
    histogram is over raw features or those posteriors (``histogram_mode``).
    """
    sub = data.partition.malicious_subgraph
    x_before = sub.features
    post_before = nn.predict(global_model, sub, x_before)
    post_after = nn.predict(global_model, sub, x_after)
    sim, s = cfg.evaluation.similarity, stage_seed(seed, "stealth")
    before = auc_cus(sub, post_before, sim, s)
    after = auc_cus(sub, post_after, sim, s)
    if cfg.evaluation.histogram_mode == "features":
        hb, edges = homophily_histogram(sub, x_before)
        ha, _ = homophily_histogram(sub, x_after)
    else:
        hb, edges = homophily_histogram(sub, post_before)
        ha, _ = homophily_histogram(sub, post_after)
    return {
        "auc_cus_before": before,
        "auc_cus_after": after,
        "hist_overlap_l1": histogram_l1(hb, ha),
        "hist_edges": edges,
        "hist_benign": hb,
        "hist_manipulated": ha,
    }


def make_oracle(cfg: ExperimentConfig, data: PreparedData, global_model: nn.ModelState, seed: int) -> PosteriorOracle:
    return PosteriorOracle(global_model, data.graph, cfg.defense.setting(), seed=stage_seed(seed, "defense"))


def evaluation_pairs(cfg: ExperimentConfig, data: PreparedData, seed: int) -> atk.SealedPairs:
    target = None
    if cfg.evaluation.target == "benign":
        inside = np.ones(data.graph.num_nodes, dtype=bool)
        inside[data.partition.malicious_nodes] = False
        target = np.flatnonzero(inside)
    if cfg.evaluation.pairs == "all":
        return atk.all_evaluation_pairs(data.graph, target)
    return atk.default_evaluation_pairs(data.graph, target, stage_seed(seed, "evaluation"))


@dataclass
class AttackOutcome:
    model: atk.AttackModel
    result: atk.ReconstructionResult
    queries: int


def run_attack(cfg: ExperimentConfig, data: PreparedData, oracle: PosteriorOracle, candidate_pairs, seed: int) -> AttackOutcome:
    """Attacker path: sees the oracle, its own subgraph and unlabeled candidate pairs only."""
    a = cfg.attack
    aseed = stage_seed(seed if a.seed < 0 else a.seed, "attack")
    shadow = atk.build_shadow_set(data.partition.malicious_subgraph, data.partition.malicious_nodes, oracle,
                                  a.negative_ratio, aseed)
    model = atk.train_attack_model(shadow, a.variant, a.epochs, aseed, a.lr, a.batch_size, a.entropy_summary)
    result = atk.reconstruct(model, oracle, candidate_pairs, a.threshold)
    return AttackOutcome(model, result, oracle.query_log)


@dataclass
class CellResult:
    seed: int
    report: MetricReport
    train: TrainOutcome
    stealth: dict
    attack: AttackOutcome
    scored: dict


def run_cell(cfg: ExperimentConfig, seed: int, data: PreparedData | None = None) -> CellResult:
    """prepare -> train -> stealth -> attack -> evaluate for one seed."""
    data = prepare(cfg, seed) if data is None else data
    trained = train(cfg, data, seed)
    st = stealth(cfg, data, trained.state.global_model, manipulated_features(data, trained.manipulated), seed)
    sealed = evaluation_pairs(cfg, data, seed)
    oracle = make_oracle(cfg, data, trained.state.global_model, seed)
    outcome = run_attack(cfg, data, oracle, sealed.pairs, seed)
    scored = score_reconstruction(outcome.result, sealed)
    report = full_report(scored, trained.test_acc, st, seed, cfg.fingerprint_dict())
    return CellResult(seed, report, trained, st, outcome, scored)
