"""End-to-end orchestration: tokenize -> features -> router -> thresholds ->
evaluation. Shared by the CLI and the test suites."""

from dataclasses import dataclass, field

import numpy as np

from . import features as feats
from . import metrics, policy
from .events import DOMAINS, LIFE_THREAT_DOMAINS, build_vocabulary, render_episode_tokens, tokenize_episode
from .router import RouterModel, SplitSpec, fit_head, platt_fit, split


@dataclass
class RouterTrainConfig:
    k: int = 5
    seed: int = 0
    use_time: bool = False
    use_prefix_weights: bool = True
    calibrate: bool = True
    svd_rank: int = 256
    min_df: int = 2
    c: float = 2.0
    max_iter: int = 3000

    def to_dict(self) -> dict:
        return {
            "k": self.k, "seed": self.seed, "use_time": self.use_time,
            "use_prefix_weights": self.use_prefix_weights, "calibrate": self.calibrate,
            "svd_rank": self.svd_rank, "min_df": self.min_df,
            "c": self.c, "max_iter": self.max_iter,
        }


def tokenize_cohort(episodes, min_count: int = 1, whitelist=None):
    """Build the vocabulary over rendered sequences and encode every episode."""
    token_lists = [render_episode_tokens(ep.events, ep.gold_diag_code) for ep in episodes]
    vocab = build_vocabulary(token_lists, min_count=min_count, whitelist=whitelist)
    for ep in episodes:
        tokenize_episode(ep, vocab)
    return episodes, vocab


@dataclass
class RouterDatasets:
    vocab: object
    tfidf: object
    svd: object
    rows: dict = field(default_factory=dict)  # split -> [PrefixRow]
    x: dict = field(default_factory=dict)  # split -> feature matrix
    y: dict = field(default_factory=dict)  # split -> (N, 5) 0/1
    w: dict = field(default_factory=dict)  # split -> sample weights
    episodes: dict = field(default_factory=dict)  # split -> [Episode]


def prepare_router_datasets(episodes, vocab, cfg: RouterTrainConfig) -> RouterDatasets:
    """Split episodes (before prefix expansion), expand, fit TF-IDF and SVD on
    the training rows only, and featurize every split."""
    train_eps, dev_eps, test_eps = split(episodes, SplitSpec(seed=cfg.seed))
    ds = RouterDatasets(vocab=vocab, tfidf=None, svd=None,
                        episodes={"train": train_eps, "dev": dev_eps, "test": test_eps})
    for name, eps in ds.episodes.items():
        ds.rows[name] = feats.expand_cohort(eps, cfg.k)
    train_docs = [feats.row_document(r, vocab) for r in ds.rows["train"]]
    ds.tfidf = feats.tfidf_fit(train_docs, min_df=cfg.min_df)
    ds.svd = feats.svd_fit(ds.tfidf.transform(train_docs), rank=cfg.svd_rank, seed=cfg.seed)
    for name in ds.rows:
        ds.x[name] = feats.featurize_rows(ds.rows[name], vocab, ds.tfidf, ds.svd, cfg.use_time)
        ds.y[name] = np.array([r.label_bits for r in ds.rows[name]], dtype=np.float64)
        if cfg.use_prefix_weights:
            ds.w[name] = np.array([r.weight for r in ds.rows[name]])
        else:
            ds.w[name] = np.ones(len(ds.rows[name]))
    return ds


def train_router(ds: RouterDatasets, cfg: RouterTrainConfig) -> RouterModel:
    from .router import PlattCalibrator

    heads = []
    for d, domain in enumerate(DOMAINS):
        heads.append(
            fit_head(ds.x["train"], ds.y["train"][:, d], ds.w["train"],
                     domain=domain, c=cfg.c, max_iter=cfg.max_iter)
        )
    calibrators = []
    for d, head in enumerate(heads):
        if cfg.calibrate:
            scores = head.raw_scores(ds.x["dev"])
            calibrators.append(platt_fit(scores, ds.y["dev"][:, d]))
        else:
            calibrators.append(PlattCalibrator(1.0, 0.0))
    return RouterModel(ds.tfidf, ds.svd, heads, calibrators, cfg.to_dict())


def prob_rows_for(model: RouterModel, ds: RouterDatasets, split_name: str,
                  calibrated: bool = True):
    """(probs, truth_domains, danger) triples for the tuner and evaluators."""
    probs = model.predict_proba(ds.x[split_name], calibrated=calibrated)
    rows = ds.rows[split_name]
    out = []
    for i, r in enumerate(rows):
        truth = tuple(d for d, b in zip(DOMAINS, r.label_bits) if b)
        out.append((probs[i], truth, r.danger))
    return out


def _policy_metrics(routes, truths, lm: metrics.LatencyModel) -> dict:
    r_any, r_all, r_life = metrics.routing_recalls(routes, truths)
    e = float(np.mean([len(r) for r in routes]))
    _, mean_lat = metrics.latency(routes, lm)
    return {
        "recall_any": r_any,
        "recall_all": r_all,
        "life_recall": r_life,
        "expected_experts": e,
        "compute_savings": metrics.compute_savings(e),
        "latency_mean_ms": mean_lat,
    }


def evaluate(model: RouterModel, ds: RouterDatasets, thresholds: policy.Thresholds,
             lm: metrics.LatencyModel | None = None, k: int = 5,
             route_kwargs: dict | None = None) -> dict:
    """Full metric report on the test split: per-head discrimination and
    calibration, tuned-policy routing quality, baselines, anytime curves."""
    lm = lm or metrics.LatencyModel()
    route_kwargs = route_kwargs or {}
    probs = model.predict_proba(ds.x["test"])
    y = ds.y["test"]
    rows = ds.rows["test"]

    per_domain = {}
    for d, domain in enumerate(DOMAINS):
        entry = {}
        try:
            entry["roc_auc"] = metrics.roc_auc(probs[:, d], y[:, d])
            entry["pr_auc"] = metrics.pr_auc(probs[:, d], y[:, d])
        except metrics.MetricError:
            entry["roc_auc"] = None
            entry["pr_auc"] = None
        brier, _, ece = metrics.calibration_metrics(probs[:, d], y[:, d])
        entry["brier"] = brier
        entry["ece"] = ece
        per_domain[domain.value] = entry
    defined = [v["roc_auc"] for v in per_domain.values() if v["roc_auc"] is not None]
    macro = {
        "roc_auc": float(np.mean(defined)) if defined else None,
        "brier": float(np.mean([v["brier"] for v in per_domain.values()])),
    }

    truths = [set(d for d, b in zip(DOMAINS, r.label_bits) if b) for r in rows]
    decisions = [
        policy.route(probs[i], thresholds, danger_flag=rows[i].danger, **route_kwargs)
        for i in range(len(rows))
    ]
    routed = [set(dec.route) for dec in decisions]
    branch_mix = {b: 0 for b in (policy.TOP1_LIFE, policy.TOP2, policy.FAIL_OPEN)}
    for dec in decisions:
        branch_mix[dec.branch] += 1

    baselines = {
        "consult_all": _policy_metrics([set(DOMAINS)] * len(rows), truths, lm),
        "fixed_cardiac_pulmonary": _policy_metrics(
            [set(LIFE_THREAT_DOMAINS)] * len(rows), truths, lm),
        "learned_router": _policy_metrics(routed, truths, lm),
    }

    def stratum_auc(idx):
        vals = []
        for d in range(len(DOMAINS)):
            vals.append(metrics.roc_auc(probs[idx][:, d], y[idx][:, d]))
        return float(np.mean(vals))

    def stratum_recall_any(idx):
        r_any, _, _ = metrics.routing_recalls(
            [routed[i] for i in idx], [truths[i] for i in idx])
        return r_any

    indices = list(range(len(rows)))
    ell_of = lambda i: rows[i].ell
    anytime = {
        "macro_roc_auc": metrics.anytime(stratum_auc, indices, ell_of, k),
        "recall_any": metrics.anytime(stratum_recall_any, indices, ell_of, k),
    }

    return {
        "router": {"per_domain": per_domain, "macro": macro},
        "policy": {
            "tau_hi": thresholds.tau_hi,
            "tau_lo": thresholds.tau_lo,
            "branch_mix": branch_mix,
            **baselines["learned_router"],
        },
        "baselines": baselines,
        "anytime": anytime,
        "n_test_rows": len(rows),
    }
