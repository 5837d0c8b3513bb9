"""Discrimination, calibration, routing-quality, compute/latency, anytime,
and bootstrap metrics. All functions are pure over immutable inputs."""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .events import DOMAINS, LIFE_THREAT_DOMAINS


class MetricError(Exception):
    pass


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc undefined for single-class labels")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Precision-recall step integration (average precision over thresholds)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricError("pr_auc undefined for single-class labels")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and scores[j] == scores[i]:
            tp += int(labels[j])
            fp += int(not labels[j])
            j += 1
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(area)


def routing_recalls(routes, truths):
    """(Recall_any, Recall_all, life-threat recall) over routed sets vs truth
    sets. Life-threat recall is restricted to episodes whose truth touches
    Cardiac or Pulmonary."""
    life = set(LIFE_THREAT_DOMAINS)
    any_hits = []
    all_hits = []
    life_hits = []
    for r, y in zip(routes, truths):
        r, y = set(r), set(y)
        if not y:
            warnings.warn("episode with empty truth set excluded from recalls")
            continue
        any_hits.append(1.0 if r & y else 0.0)
        all_hits.append(1.0 if y <= r else 0.0)
        if y & life:
            life_hits.append(1.0 if r & life else 0.0)
    if not any_hits:
        raise MetricError("no episodes with non-empty truth sets")
    life_recall = float(np.mean(life_hits)) if life_hits else float("nan")
    return float(np.mean(any_hits)), float(np.mean(all_hits)), life_recall


@dataclass
class LatencyModel:
    l_router: float = 10.0
    per_expert: dict = field(default_factory=dict)  # {DomainLabel: ms}
    l_expert_default: float = 50.0

    def expert_ms(self, domain) -> float:
        return float(self.per_expert.get(domain, self.l_expert_default))


def latency(routes, lm: LatencyModel):
    """Per-episode L_i = L_router + sum of consulted expert times, plus mean."""
    per = [lm.l_router + sum(lm.expert_ms(d) for d in r) for r in routes]
    return per, float(np.mean(per)) if per else float("nan")


def compute_savings(expected_experts: float) -> float:
    """Fraction of expert compute saved versus consult-all (5 experts)."""
    if not 1.0 <= expected_experts <= 5.0:
        raise MetricError(f"expected experts {expected_experts} outside [1, 5]")
    return 1.0 - expected_experts / 5.0


def calibration_metrics(probs, labels, bins: int = 10):
    """Brier score, reliability table, and expected calibration error."""
    probs = np.asarray(probs, dtype=np.float64)
    outcomes = np.asarray(labels, dtype=np.float64)
    brier = float(np.mean((probs - outcomes) ** 2))
    edges = np.linspace(0.0, 1.0, bins + 1)
    table = []
    ece = 0.0
    n = len(probs)
    for b in range(bins):
        lo, hi = edges[b], edges[b + 1]
        mask = (probs >= lo) & (probs < hi) if b < bins - 1 else (probs >= lo) & (probs <= hi)
        count = int(mask.sum())
        if count == 0:
            table.append({"bin": b, "mean_prob": None, "empirical_rate": None, "count": 0})
            continue
        mean_p = float(probs[mask].mean())
        rate = float(outcomes[mask].mean())
        table.append({"bin": b, "mean_prob": mean_p, "empirical_rate": rate, "count": count})
        ece += (count / n) * abs(mean_p - rate)
    return brier, table, float(ece)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-relevance NDCG with log2 discounting."""
    if k < 1:
        raise MetricError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        warnings.warn("empty relevant set; NDCG is 0")
        return 0.0
    dcg = sum(
        1.0 / np.log2(i + 2) for i, item in enumerate(ranked[:k]) if item in relevant
    )
    ideal = sum(1.0 / np.log2(i + 2) for i in range(min(k, len(relevant))))
    return float(dcg / ideal)


def topk_recall(ranked, target, k: int) -> float:
    if k < 1:
        raise MetricError("k must be >= 1")
    return 1.0 if target in ranked[:k] else 0.0


def anytime(metric_fn, rows, ell_of, k: int) -> dict:
    """Evaluate metric_fn per prefix-length stratum; undefined strata are
    None, not zero."""
    curve = {}
    for ell in range(1, k + 1):
        stratum = [r for r in rows if ell_of(r) == ell]
        if not stratum:
            curve[ell] = None
            continue
        try:
            curve[ell] = metric_fn(stratum)
        except MetricError:
            curve[ell] = None
    return curve


def bootstrap_ci(metric_fn, episodes, b: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile interval over B episode-level resamples (all prefixes of an
    episode move together because resampling happens at episode granularity)."""
    episodes = list(episodes)
    if len(episodes) < 10:
        raise MetricError("bootstrap needs at least 10 episodes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB007]))
    n = len(episodes)
    reps = np.empty(b)
    for i in range(b):
        idx = rng.integers(0, n, size=n)
        reps[i] = metric_fn([episodes[j] for j in idx])
    alpha = (1.0 - level) / 2.0
    return float(np.quantile(reps, alpha)), float(np.quantile(reps, 1.0 - alpha))


def macro_average(per_domain: dict) -> float:
    vals = [per_domain[d] for d in per_domain]
    if len(vals) != len(DOMAINS):
        warnings.warn("macro average over a partial domain set")
    return float(np.mean(vals))
