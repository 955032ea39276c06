"""Attack and utility metrics, stealth diagnostics and posterior-noise defenses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .attack import DISTANCE_NAMES, distance_features
from .graph import Graph, sample_non_edges


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    return s, y


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney U statistic with average ranks for ties."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_metrics(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """(precision at ``threshold``, average precision).

    Average precision sums precision * recall-increment over distinct score
    thresholds, tied scores forming one step.
    """
    s, y = _check_binary(scores, labels)
    pred = s >= threshold
    precision = float((pred & y).sum() / pred.sum()) if pred.any() else 0.0

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s_sorted) - 1]
    tp, fp = tp[last], fp[last]
    recall_step = np.diff(np.r_[0, tp]) / tp[-1]
    ap = float((recall_step * tp / (tp + fp)).sum())
    return precision, ap


def accuracy(posteriors, labels, mask) -> float:
    """Fraction of masked nodes whose argmax posterior equals the label (ties -> lowest class)."""
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("mask is empty")
    pred = np.argmax(np.asarray(posteriors)[idx], axis=1)
    return float((pred == np.asarray(labels)[idx]).mean())


SIMILARITIES = DISTANCE_NAMES


def pair_similarity(a, b, similarity: str = "cosine") -> np.ndarray:
    """Cosine similarity, or the negated distance for any other named distance."""
    if similarity not in SIMILARITIES:
        raise ValueError(f"unknown similarity {similarity!r}")
    dist = distance_features(a, b)[:, DISTANCE_NAMES.index(similarity)]
    return 1.0 - dist if similarity == "cosine" else -dist


def auc_cus(graph: Graph, posteriors, similarity: str = "cosine", seed: int = 0) -> float:
    """AUC of a similarity score separating connected from sampled unconnected pairs."""
    if graph.num_edges == 0:
        raise ValueError("graph has no edges")
    neg = sample_non_edges(graph, graph.num_edges, np.random.default_rng(seed))
    pairs = np.concatenate([graph.edges, neg])
    p = np.asarray(posteriors, dtype=np.float64)
    scores = pair_similarity(p[pairs[:, 0]], p[pairs[:, 1]], similarity)
    labels = np.r_[np.ones(graph.num_edges), np.zeros(len(neg))]
    return auc(scores, labels)


# --- stealth histograms ---------------------------------------------------

HIST_BINS = 64


def homophily_histogram(graph: Graph, values, bins: int = HIST_BINS):
    """Counts of connected-pair cosine similarity over [-1, 1]; returns (counts, edges)."""
    v = np.asarray(values, dtype=np.float64)
    a, b = v[graph.edges[:, 0]], v[graph.edges[:, 1]]
    cos = np.clip(1.0 - distance_features(a, b)[:, 0], -1.0, 1.0) if len(a) else np.zeros(0)
    counts, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    return counts, edges


def histogram_l1(counts_a, counts_b) -> float:
    """L1 distance between two histograms normalised to unit mass (in [0, 2])."""
    a = np.asarray(counts_a, dtype=np.float64)
    b = np.asarray(counts_b, dtype=np.float64)
    if a.sum() == 0 or b.sum() == 0:
        return 0.0 if a.sum() == b.sum() else 2.0
    return float(np.abs(a / a.sum() - b / b.sum()).sum())


# --- defenses -------------------------------------------------------------

@dataclass(frozen=True)
class DefenseSetting:
    kind: str = "none"
    strength: float = 0.0
    renormalize: bool = True

    def __post_init__(self):
        if self.kind not in ("none", "laplace", "gaussian"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.strength < 0:
            raise ValueError("defense strength must be >= 0")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.strength > 0


def apply_defense(posterior, setting: DefenseSetting, rng) -> np.ndarray:
    """Add zero-mean Laplace (scale) or Gaussian (std) noise to one posterior vector."""
    p = np.asarray(posterior, dtype=np.float64)
    if not setting.active:
        return p.copy()
    if setting.kind == "laplace":
        noisy = p + rng.laplace(0.0, setting.strength, size=p.shape)
    else:
        noisy = p + rng.normal(0.0, setting.strength, size=p.shape)
    if setting.renormalize:
        noisy = np.clip(noisy, 0.0, None)
        total = noisy.sum()
        noisy = noisy / total if total > 0 else np.full_like(p, 1.0 / len(p))
    return noisy


# --- reporting ------------------------------------------------------------

REPORT_KEYS = (
    "attack_auc",
    "attack_precision",
    "attack_ap",
    "main_acc",
    "auc_cus_before",
    "auc_cus_after",
    "hist_overlap_l1",
    "seed",
    "config_hash",
)


@dataclass(frozen=True)
class MetricReport:
    attack_auc: float
    attack_precision: float
    attack_ap: float
    main_acc: float
    auc_cus_before: float
    auc_cus_after: float
    hist_overlap_l1: float
    seed: int
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        missing = set(REPORT_KEYS) - data.keys()
        if missing:
            raise ValueError(f"report is missing keys: {sorted(missing)}")
        return cls(**{k: data[k] for k in REPORT_KEYS})


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def score_reconstruction(result, sealed) -> dict:
    """Join attack scores with the sealed evaluation labels."""
    labels = sealed.unseal()
    lookup = {tuple(p): s for p, s in zip(result.pairs.tolist(), result.scores.tolist())}
    scores = np.array([lookup[tuple(p)] for p in sealed.pairs.tolist()])
    precision, ap = precision_metrics(scores, labels, result.threshold)
    return {"attack_auc": auc(scores, labels), "attack_precision": precision, "attack_ap": ap,
            "scores": scores, "labels": labels}


def full_report(attack_scores: dict, main_acc: float, stealth: dict, seed: int, config: dict) -> MetricReport:
    """Assemble one report from attack scores, utility and stealth numbers."""
    return MetricReport(
        attack_auc=float(attack_scores["attack_auc"]),
        attack_precision=float(attack_scores["attack_precision"]),
        attack_ap=float(attack_scores["attack_ap"]),
        main_acc=float(main_acc),
        auc_cus_before=float(stealth["auc_cus_before"]),
        auc_cus_after=float(stealth["auc_cus_after"]),
        hist_overlap_l1=float(stealth["hist_overlap_l1"]),
        seed=int(seed),
        config_hash=config_hash(config),
    )
