"""Safety-first routing decision, threshold grid search under a life-threat
recall constraint, deterministic arbitration, and audit records."""

import json
from dataclasses import dataclass, field

import numpy as np

from .events import DOMAINS, LIFE_THREAT_DOMAINS, DomainLabel
from .metrics import routing_recalls

FAIL_OPEN_FLOOR = 0.25

TOP1_LIFE = "TOP1_LIFE"
TOP2 = "TOP2"
FAIL_OPEN = "FAIL_OPEN"

_LIFE_IDX = [DOMAINS.index(d) for d in LIFE_THREAT_DOMAINS]


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class Thresholds:
    tau_hi: float
    tau_lo: float
    fail_open_floor: float = FAIL_OPEN_FLOOR

    def __post_init__(self):
        if not (0.0 <= self.tau_lo <= self.tau_hi <= 1.0):
            raise PolicyError(f"need 0 <= tau_lo <= tau_hi <= 1, got {self}")


@dataclass
class RouteDecision:
    route: tuple  # DomainLabel tuple, priority-ordered
    branch: str
    probs: tuple
    tau_hi: float
    tau_lo: float
    timestamp: str | None = None

    def to_dict(self) -> dict:
        return {
            "route": [d.value for d in self.route],
            "branch": self.branch,
            "probs": list(self.probs),
            "tau_hi": self.tau_hi,
            "tau_lo": self.tau_lo,
            "timestamp": self.timestamp,
        }


def route(probs, thr: Thresholds, danger_flag: bool = False,
          restrict_top1_to_life: bool = True,
          life_guard_tau: float | None = None) -> RouteDecision:
    """Apply the routing rules in order:

    (a) danger flag, or all probabilities below the fail-open floor -> all 5;
    (b) a life-threat domain at or above tau_hi -> top-1 (restricted to
        Cardiac/Pulmonary unless `restrict_top1_to_life` is off);
    (c) any domain at or above tau_lo -> top-2 by probability, ties broken by
        priority; with `life_guard_tau` set, Cardiac and Pulmonary are added
        whenever their max reaches that guard threshold;
    (d) otherwise fail open.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (len(DOMAINS),):
        raise PolicyError(f"expected {len(DOMAINS)} probabilities, got shape {p.shape}")
    if np.any(np.isnan(p)) or np.any(p < 0) or np.any(p > 1):
        raise PolicyError("probabilities must be finite and within [0, 1]")

    def decision(selected, branch):
        return RouteDecision(tuple(selected), branch, tuple(float(v) for v in p),
                             thr.tau_hi, thr.tau_lo)

    if danger_flag or p.max() < thr.fail_open_floor:
        return decision(DOMAINS, FAIL_OPEN)

    life_max = max(p[i] for i in _LIFE_IDX)
    if life_max >= thr.tau_hi:
        if restrict_top1_to_life:
            pick = min(_LIFE_IDX, key=lambda i: (-p[i], i))
        else:
            pick = min(range(len(DOMAINS)), key=lambda i: (-p[i], i))
        return decision([DOMAINS[pick]], TOP1_LIFE)

    if p.max() >= thr.tau_lo:
        order = sorted(range(len(DOMAINS)), key=lambda i: (-p[i], i))
        selected = sorted(order[:2])
        if life_guard_tau is not None and life_max >= life_guard_tau:
            selected = sorted(set(selected) | set(_LIFE_IDX))
        return decision([DOMAINS[i] for i in selected], TOP2)

    return decision(DOMAINS, FAIL_OPEN)


def expected_experts(decisions) -> float:
    if not decisions:
        raise PolicyError("expected_experts needs at least one decision")
    return float(np.mean([len(d.route) for d in decisions]))


def default_grid():
    """tau_hi in {0.50..0.95 step .05} x tau_lo in {0.10..0.50 step .05}."""
    his = [round(0.50 + 0.05 * i, 2) for i in range(10)]
    los = [round(0.10 + 0.05 * i, 2) for i in range(9)]
    return [(hi, lo) for hi in his for lo in los]


@dataclass
class TuneResult:
    tau_hi: float
    tau_lo: float
    life_recall: float
    expected_experts: float
    constraint_met: bool
    table: list = field(default_factory=list)


def _evaluate_point(hi, lo, prob_rows, **route_kwargs):
    thr = Thresholds(hi, lo)
    routes = []
    truths = []
    for probs, truth, danger in prob_rows:
        dec = route(probs, thr, danger_flag=danger, **route_kwargs)
        routes.append(set(dec.route))
        truths.append(set(truth))
    r_any, r_all, r_life = routing_recalls(routes, truths)
    e = float(np.mean([len(r) for r in routes]))
    return {
        "tau_hi": hi,
        "tau_lo": lo,
        "life_recall": r_life,
        "expected_experts": e,
        "recall_any": r_any,
        "recall_all": r_all,
    }


def tune_thresholds(prob_rows, grid=None, constraint: float = 0.98, **route_kwargs) -> TuneResult:
    """Grid search (tau_hi, tau_lo) with tau_lo <= tau_hi.

    prob_rows: iterable of (probs, truth_domains, danger_flag).
    Selection: among constraint-satisfying points, minimal E[|R|] (ties:
    higher life recall, then ascending (tau_hi, tau_lo)); if none satisfies
    the constraint, maximal life recall (ties: lower E[|R|], then ascending
    point).
    """
    prob_rows = list(prob_rows)
    if grid is None:
        grid = default_grid()
    grid = [(hi, lo) for hi, lo in grid if lo <= hi]
    if not grid:
        raise PolicyError("empty threshold grid")
    if not any(set(truth) & set(LIFE_THREAT_DOMAINS) for _, truth, _ in prob_rows):
        raise PolicyError("no life-threat episodes; safety constraint undefined")

    table = [_evaluate_point(hi, lo, prob_rows, **route_kwargs) for hi, lo in grid]
    feasible = [row for row in table if row["life_recall"] >= constraint]
    if feasible:
        best = min(
            feasible,
            key=lambda r: (r["expected_experts"], -r["life_recall"], r["tau_hi"], r["tau_lo"]),
        )
        met = True
    else:
        best = min(
            table,
            key=lambda r: (-r["life_recall"], r["expected_experts"], r["tau_hi"], r["tau_lo"]),
        )
        met = False
    return TuneResult(
        tau_hi=best["tau_hi"],
        tau_lo=best["tau_lo"],
        life_recall=best["life_recall"],
        expected_experts=best["expected_experts"],
        constraint_met=met,
        table=table,
    )


def write_frontier_csv(path, table) -> None:
    cols = ["tau_hi", "tau_lo", "life_recall", "expected_experts", "recall_any", "recall_all"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(repr(row[c]) for c in cols) + "\n")


def arbitrate(suggestions: dict) -> list:
    """Merge per-expert ranked lists: expert priority first, then within-
    expert rank; duplicates keep the highest-priority occurrence.

    Returns [(item, attributed_domain)] in merged order.
    """
    merged = []
    seen = set()
    for domain in DOMAINS:
        for item in suggestions.get(domain, []):
            if item not in seen:
                seen.add(item)
                merged.append((item, domain))
    return merged


@dataclass
class AuditRecord:
    episode_id: str
    ell: int
    raw_scores: tuple
    probs: tuple
    tau_hi: float
    tau_lo: float
    branch: str
    route: tuple
    arbitration: list = field(default_factory=list)
    danger_flag: bool = False
    timestamp: str | None = None

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "ell": self.ell,
            "raw_scores": list(self.raw_scores),
            "probs": list(self.probs),
            "tau_hi": self.tau_hi,
            "tau_lo": self.tau_lo,
            "branch": self.branch,
            "route": [d.value for d in self.route],
            "arbitration": self.arbitration,
            "danger_flag": self.danger_flag,
            "timestamp": self.timestamp,
        }


class AuditLog:
    """Append-only JSONL audit sink; one record per routed prefix."""

    def __init__(self, path):
        self.path = path
        self.count = 0

    def append(self, record: AuditRecord) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        self.count += 1
