"""Clinical event model, token template, ordering, gap markers, vocabulary,
and episode sequence assembly.

Tokens follow a fixed type-prefixed template:
    [DIAG]_ICD9_<code>   [OBS]_LAB_<test>:<bin>   [ACTION]_ORD_<order>
    [GAP]_H<k>           [BOS] [EOS] [PAD] [UNK]
"""

import json
from dataclasses import dataclass, field
from enum import Enum

MAX_SEQ_LEN = 512
DEFAULT_GAP_THRESHOLDS = (1, 6)  # hours

LAB_BINS = ("LOW", "NORMAL", "HIGH", "CRITICAL", "POS", "NEG")

PAD, UNK, BOS, EOS = "[PAD]", "[UNK]", "[BOS]", "[EOS]"
SENTINELS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3


class SchemaError(Exception):
    pass


class EventKind(str, Enum):
    DIAG = "DIAG"
    LAB = "LAB"
    ORDER = "ORDER"
    GAP = "GAP"
    BOS = "BOS"
    EOS = "EOS"
    PAD = "PAD"
    UNK = "UNK"


# Sort precedence within a timestamp; DIAG first.
_PRECEDENCE = {EventKind.DIAG: 0, EventKind.LAB: 1, EventKind.ORDER: 2}


class DomainLabel(str, Enum):
    CARDIAC = "Cardiac"
    PULMONARY = "Pulmonary"
    GASTRO = "Gastro"
    MUSCULOSKELETAL = "Musculoskeletal"
    PSYCHOGENIC = "Psychogenic"

    @property
    def priority(self) -> int:
        return DOMAINS.index(self) + 1

    @property
    def life_threat(self) -> bool:
        return self in LIFE_THREAT_DOMAINS


DOMAINS = (
    DomainLabel.CARDIAC,
    DomainLabel.PULMONARY,
    DomainLabel.GASTRO,
    DomainLabel.MUSCULOSKELETAL,
    DomainLabel.PSYCHOGENIC,
)
LIFE_THREAT_DOMAINS = (DomainLabel.CARDIAC, DomainLabel.PULMONARY)
N_DOMAINS = len(DOMAINS)


def multi_hot(labels) -> tuple:
    labs = {DomainLabel(l) for l in labels}
    return tuple(1 if d in labs else 0 for d in DOMAINS)


def labels_from_multi_hot(bits) -> tuple:
    return tuple(d for d, b in zip(DOMAINS, bits) if b)


@dataclass(frozen=True)
class ClinicalEvent:
    kind: EventKind
    code: str
    value_bin: str | None = None
    timestamp: int = 0  # minutes since episode start

    def validate(self) -> None:
        if self.timestamp < 0:
            raise SchemaError(f"negative timestamp {self.timestamp}")
        if self.kind == EventKind.LAB:
            if self.value_bin not in LAB_BINS:
                raise SchemaError(f"LAB event requires a value bin, got {self.value_bin!r}")
        elif self.value_bin is not None:
            raise SchemaError(f"{self.kind.value} event must not carry a value bin")
        if self.kind in (EventKind.DIAG, EventKind.LAB, EventKind.ORDER, EventKind.GAP):
            if not self.code:
                raise SchemaError(f"empty code for {self.kind.value} event")


def render_token(event: ClinicalEvent) -> str:
    """Render one event to its unique template token text."""
    event.validate()
    k = event.kind
    if k == EventKind.DIAG:
        return f"[DIAG]_ICD9_{event.code}"
    if k == EventKind.LAB:
        return f"[OBS]_LAB_{event.code}:{event.value_bin}"
    if k == EventKind.ORDER:
        return f"[ACTION]_ORD_{event.code}"
    if k == EventKind.GAP:
        return f"[GAP]_H{event.code}"
    return f"[{k.value}]"


def order_events(events):
    """Chronological sort, then DIAG > LAB > ORDER, then alphabetical token
    text within a kind. Stable: fully identical keys keep input order."""
    return sorted(
        events, key=lambda e: (e.timestamp, _PRECEDENCE.get(e.kind, 99), render_token(e))
    )


def insert_gap_markers(events, thresholds=DEFAULT_GAP_THRESHOLDS):
    """Insert [GAP]_H<k> between consecutive events whose gap reaches the
    largest qualifying threshold (hours). Events must already be ordered."""
    out = []
    for i, ev in enumerate(events):
        if i > 0:
            gap = ev.timestamp - events[i - 1].timestamp
            marker = None
            for k in thresholds:
                if k * 60 <= gap:
                    marker = k
            if marker is not None:
                out.append(
                    ClinicalEvent(EventKind.GAP, str(marker), timestamp=events[i - 1].timestamp)
                )
        out.append(ev)
    return out


class Vocabulary:
    """Dense token<->id maps with fixed sentinel ids 0-3."""

    def __init__(self, tokens_with_counts):
        self.token_to_id = {t: i for i, t in enumerate(SENTINELS)}
        self.counts = {t: 0 for t in SENTINELS}
        for tok, cnt in tokens_with_counts:
            if tok in self.token_to_id:
                raise SchemaError(f"duplicate token {tok!r}")
            self.token_to_id[tok] = len(self.token_to_id)
            self.counts[tok] = cnt
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    def encode(self, text: str) -> int:
        return self.token_to_id.get(text, UNK_ID)

    def decode(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                tok = self.id_to_token[i]
                fh.write(f"{i}\t{tok}\t{self.counts[tok]}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                sid, tok, cnt = line.rstrip("\n").split("\t")
                rows.append((int(sid), tok, int(cnt)))
        rows.sort()
        return cls([(tok, cnt) for sid, tok, cnt in rows if tok not in SENTINELS])


def _passes_whitelist(token: str, whitelist) -> bool:
    # Whitelist filters code families; gap markers and sentinels are exempt.
    if not whitelist or token.startswith("[GAP]"):
        return True
    return any(token.startswith(p) for p in whitelist)


def build_vocabulary(token_lists, min_count: int = 1, whitelist=None) -> Vocabulary:
    """Count tokens across rendered sequences; keep those at or above
    min_count and inside the whitelist. Order: descending count, ties
    alphabetical (byte-wise)."""
    counts: dict[str, int] = {}
    for toks in token_lists:
        for tok in toks:
            if tok in SENTINELS:
                continue
            counts[tok] = counts.get(tok, 0) + 1
    kept = [
        (tok, cnt)
        for tok, cnt in counts.items()
        if cnt >= min_count and _passes_whitelist(tok, whitelist)
    ]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary(kept)


def render_episode_tokens(events, gold_diag_code=None, gap_thresholds=DEFAULT_GAP_THRESHOLDS):
    """Order events, insert gap markers, render, and drop the gold-label
    diagnosis rendering (label-leak prevention). Returns token texts."""
    ordered = insert_gap_markers(order_events(events), gap_thresholds)
    gold_text = (
        render_token(ClinicalEvent(EventKind.DIAG, gold_diag_code)) if gold_diag_code else None
    )
    return [t for t in map(render_token, ordered) if t != gold_text]


def build_sequence(
    events,
    vocab: Vocabulary,
    gold_diag_code=None,
    max_len: int = MAX_SEQ_LEN,
    gap_thresholds=DEFAULT_GAP_THRESHOLDS,
):
    """[BOS] + encoded content + [EOS]; truncation keeps the most recent
    (max_len - 2) tokens."""
    texts = render_episode_tokens(events, gold_diag_code, gap_thresholds)
    ids = [vocab.encode(t) for t in texts][-(max_len - 2):]
    return [BOS_ID] + ids + [EOS_ID]


@dataclass
class Episode:
    episode_id: str
    events: list = field(default_factory=list)
    tokens: list = field(default_factory=list)  # token ids incl BOS/EOS
    time_feats: list = field(default_factory=list)
    labels: tuple = ()  # DomainLabel tuple
    gold_diag_code: str | None = None
    danger: bool = False

    @property
    def content_tokens(self) -> list:
        return [t for t in self.tokens if t not in (BOS_ID, EOS_ID)]

    def label_bits(self) -> tuple:
        return multi_hot(self.labels)


def tokenize_episode(ep: Episode, vocab: Vocabulary, max_len: int = MAX_SEQ_LEN,
                     gap_thresholds=DEFAULT_GAP_THRESHOLDS) -> Episode:
    ep.tokens = build_sequence(ep.events, vocab, ep.gold_diag_code, max_len, gap_thresholds)
    return ep


def compute_time_feats(events) -> list:
    """[minutes-to-first-order, max inter-event gap]; empty when no events."""
    if not events:
        return []
    ordered = order_events(events)
    first_order = next((e.timestamp for e in ordered if e.kind == EventKind.ORDER), None)
    ts = [e.timestamp for e in ordered]
    max_gap = max((b - a for a, b in zip(ts, ts[1:])), default=0)
    return [float(first_order if first_order is not None else ts[-1]), float(max_gap)]


# --- JSONL episode files ---------------------------------------------------

def episode_to_dict(ep: Episode) -> dict:
    evs = []
    for e in ep.events:
        d = {"kind": e.kind.value, "code": e.code, "t_min": e.timestamp}
        if e.value_bin is not None:
            d["bin"] = e.value_bin
        evs.append(d)
    out = {
        "episode_id": ep.episode_id,
        "events": evs,
        "time_feats": list(ep.time_feats),
        "labels": [d.value for d in ep.labels],
        "gold": ep.gold_diag_code or "",
    }
    if ep.danger:
        out["danger"] = True
    return out


def episode_from_dict(d: dict) -> Episode:
    events = [
        ClinicalEvent(
            EventKind(e["kind"]), e["code"], e.get("bin"), int(e["t_min"])
        )
        for e in d["events"]
    ]
    return Episode(
        episode_id=d["episode_id"],
        events=events,
        time_feats=list(d.get("time_feats", [])),
        labels=tuple(DomainLabel(x) for x in d.get("labels", [])),
        gold_diag_code=d.get("gold") or None,
        danger=bool(d.get("danger", False)),
    )


def write_episodes_jsonl(path, episodes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_dict(ep), sort_keys=True) + "\n")


def read_episodes_jsonl(path) -> list:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                episodes.append(episode_from_dict(json.loads(line)))
    return episodes
