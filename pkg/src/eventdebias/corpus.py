"""Corpus ingestion, label merging, temporal event-disjoint splits, synthetic data.

A corpus is an immutable collection of posts. Every post belongs to exactly one
event and every event to exactly one domain (event type). Splits partition
events, never posts, so train/valid/test are event-disjoint by construction.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .tokenization import pretokenize

MULTI_CLASS = "multi-class"
MULTI_LABEL = "multi-label"

REQUIRED_FIELDS = ("id", "text", "labels", "event_id", "domain", "timestamp")


class CorpusError(ValueError):
    """Schema or consistency violation, with file position when available."""

    def __init__(self, message: str, path: str | None = None, line_no: int | None = None):
        self.path = path
        self.line_no = line_no
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
            if line_no is not None:
                prefix += f"{line_no}:"
            prefix += " "
        super().__init__(prefix + message)


@dataclass(frozen=True)
class LabelSpace:
    task_kind: str
    names: tuple[str, ...]

    def __post_init__(self):
        if self.task_kind not in (MULTI_CLASS, MULTI_LABEL):
            raise CorpusError(f"unknown task_kind {self.task_kind!r}")
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise CorpusError(f"label space needs >= 2 labels, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise CorpusError("label names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise CorpusError(f"unknown label name {name!r}") from None


@dataclass(frozen=True)
class Post:
    id: str
    text: str
    tokens: tuple[str, ...]
    labels: frozenset[int]
    event_id: str
    domain: str
    timestamp: datetime

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError(f"post {self.id!r} has no tokens after tokenization")
        if not self.labels:
            raise CorpusError(f"post {self.id!r} has no labels")


@dataclass
class Corpus:
    posts: list[Post]
    label_space: LabelSpace
    domains: tuple[str, ...]

    def __post_init__(self):
        self.domains = tuple(self.domains)
        known = set(self.domains)
        event_domain: dict[str, str] = {}
        n_labels = len(self.label_space)
        for post in self.posts:
            if post.domain not in known:
                raise CorpusError(f"post {post.id!r} has unknown domain {post.domain!r}")
            seen = event_domain.setdefault(post.event_id, post.domain)
            if seen != post.domain:
                raise CorpusError(
                    f"event {post.event_id!r} maps to both domains {seen!r} and {post.domain!r}")
            if any(l < 0 or l >= n_labels for l in post.labels):
                raise CorpusError(f"post {post.id!r} has label index outside the label space")
            if self.label_space.task_kind == MULTI_CLASS and len(post.labels) != 1:
                raise CorpusError(
                    f"post {post.id!r} has {len(post.labels)} labels in a multi-class corpus")

    def __len__(self) -> int:
        return len(self.posts)

    @property
    def event_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for post in self.posts:
            seen.setdefault(post.event_id)
        return list(seen)

    def posts_by_event(self) -> dict[str, list[Post]]:
        grouped: dict[str, list[Post]] = {}
        for post in self.posts:
            grouped.setdefault(post.event_id, []).append(post)
        return grouped

    def event_domain(self) -> dict[str, str]:
        return {p.event_id: p.domain for p in self.posts}


@dataclass(frozen=True)
class SplitSpec:
    """Either chronological counts or an explicit event-id assignment."""

    counts: tuple[int, int, int] | None = None
    train_events: frozenset[str] | None = None
    valid_events: frozenset[str] | None = None
    test_events: frozenset[str] | None = None

    def __post_init__(self):
        explicit = (self.train_events, self.valid_events, self.test_events)
        if self.counts is None and any(s is None for s in explicit):
            raise CorpusError("SplitSpec needs counts or all three explicit event sets")
        if self.counts is not None and any(s is not None for s in explicit):
            raise CorpusError("SplitSpec takes counts or explicit sets, not both")


def _parse_timestamp(raw: str) -> datetime:
    ts = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _post_from_record(record: Mapping, label_space: LabelSpace,
                      path: str, line_no: int) -> Post:
    for fld in REQUIRED_FIELDS:
        if fld not in record:
            raise CorpusError(f"missing field {fld!r}", path, line_no)
    raw_labels = record["labels"]
    if isinstance(raw_labels, str) or not isinstance(raw_labels, (list, tuple)):
        raise CorpusError("'labels' must be a list of label names", path, line_no)
    try:
        labels = frozenset(label_space.index(name) for name in raw_labels)
    except CorpusError as e:
        raise CorpusError(str(e), path, line_no) from None
    try:
        ts = _parse_timestamp(record["timestamp"])
    except (ValueError, TypeError):
        raise CorpusError(
            f"unparsable timestamp {record['timestamp']!r}", path, line_no) from None
    tokens = tuple(pretokenize(record["text"]))
    if not tokens:
        raise CorpusError("text yields no tokens", path, line_no)
    try:
        return Post(id=str(record["id"]), text=record["text"], tokens=tokens,
                    labels=labels, event_id=str(record["event_id"]),
                    domain=str(record["domain"]), timestamp=ts)
    except CorpusError as e:
        raise CorpusError(str(e), path, line_no) from None


def load_corpus(path: str | Path, label_space: LabelSpace,
                domains: Sequence[str] | None = None) -> Corpus:
    """Load a JSONL corpus, failing on the first schema violation.

    When ``domains`` is given, posts outside it are rejected; otherwise the
    domain list is derived from the data in order of first appearance.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file does not exist: {path}")
    posts: list[Post] = []
    seen_domains: dict[str, None] = {}
    declared = set(domains) if domains is not None else None
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"invalid JSON: {e.msg}", str(path), line_no) from None
            post = _post_from_record(record, label_space, str(path), line_no)
            if declared is not None and post.domain not in declared:
                raise CorpusError(f"unknown domain {post.domain!r}", str(path), line_no)
            seen_domains.setdefault(post.domain)
            posts.append(post)
    domain_list = tuple(domains) if domains is not None else tuple(seen_domains)
    return Corpus(posts=posts, label_space=label_space, domains=domain_list)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for post in corpus.posts:
            record = {
                "id": post.id,
                "text": post.text,
                "labels": sorted(corpus.label_space.names[i] for i in post.labels),
                "event_id": post.event_id,
                "domain": post.domain,
                "timestamp": post.timestamp.isoformat(),
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def remap_labels(corpus: Corpus, merge_map: Mapping[str, str]) -> Corpus:
    """Rewrite the label space through ``merge_map`` (old name -> new name).

    The new space keeps the order of first appearance over the old names;
    multi-label duplicates collapse to a set. Post count and event assignment
    are untouched.
    """
    old_names = corpus.label_space.names
    missing = [name for name in old_names if name not in merge_map]
    if missing:
        raise CorpusError(f"merge_map is missing old labels: {missing}")
    new_names: list[str] = []
    for old in old_names:
        new = merge_map[old]
        if new not in new_names:
            new_names.append(new)
    if not new_names:
        raise CorpusError("merge_map produces an empty label space")
    new_space = LabelSpace(task_kind=corpus.label_space.task_kind, names=tuple(new_names))
    index_map = {i: new_names.index(merge_map[old]) for i, old in enumerate(old_names)}
    new_posts = [replace(p, labels=frozenset(index_map[l] for l in p.labels))
                 for p in corpus.posts]
    return Corpus(posts=new_posts, label_space=new_space, domains=corpus.domains)


def filter_corpus(corpus: Corpus, drop_labels: Sequence[str] = (),
                  min_posts_per_event: int = 0) -> Corpus:
    """Declarative cleanup filters: drop labels, then thin out small events.

    Multi-class posts carrying a dropped label are removed; multi-label posts
    lose the dropped label and are removed only if nothing remains.
    """
    space = corpus.label_space
    drop_idx = {space.index(name) for name in drop_labels}
    keep_names = [n for i, n in enumerate(space.names) if i not in drop_idx]
    if len(keep_names) < 2:
        raise CorpusError("dropping these labels leaves fewer than 2 labels")
    new_space = LabelSpace(task_kind=space.task_kind, names=tuple(keep_names))
    reindex = {old: keep_names.index(space.names[old])
               for old in range(len(space)) if old not in drop_idx}

    posts: list[Post] = []
    for post in corpus.posts:
        kept = frozenset(reindex[l] for l in post.labels if l not in drop_idx)
        if not kept:
            continue
        posts.append(replace(post, labels=kept))

    if min_posts_per_event > 0:
        sizes: dict[str, int] = {}
        for post in posts:
            sizes[post.event_id] = sizes.get(post.event_id, 0) + 1
        posts = [p for p in posts if sizes[p.event_id] >= min_posts_per_event]

    domains_left = {p.domain for p in posts}
    domains = tuple(d for d in corpus.domains if d in domains_left)
    return Corpus(posts=posts, label_space=new_space, domains=domains)


def _chronological_events(corpus: Corpus) -> list[str]:
    earliest: dict[str, datetime] = {}
    for post in corpus.posts:
        cur = earliest.get(post.event_id)
        if cur is None or post.timestamp < cur:
            earliest[post.event_id] = post.timestamp
    # ties broken by event_id so splits are deterministic
    return sorted(earliest, key=lambda e: (earliest[e], e))


def temporal_split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Partition events chronologically: earliest block trains, latest tests."""
    events = _chronological_events(corpus)
    if spec.counts is not None:
        n_train, n_valid, n_test = spec.counts
        if min(n_train, n_valid, n_test) < 0 or n_train + n_valid + n_test != len(events):
            raise CorpusError(
                f"split counts {spec.counts} do not sum to the {len(events)} events")
        train_ids = set(events[:n_train])
        valid_ids = set(events[n_train:n_train + n_valid])
        test_ids = set(events[n_train + n_valid:])
    else:
        train_ids = set(spec.train_events)
        valid_ids = set(spec.valid_events)
        test_ids = set(spec.test_events)
        if (train_ids & valid_ids) or (train_ids & test_ids) or (valid_ids & test_ids):
            raise CorpusError("explicit split event sets overlap")
        if train_ids | valid_ids | test_ids != set(events):
            raise CorpusError("explicit split event sets do not cover the corpus")

    def subset(ids: set[str]) -> Corpus:
        posts = [p for p in corpus.posts if p.event_id in ids]
        domains_here = {p.domain for p in posts}
        return Corpus(posts=posts, label_space=corpus.label_space,
                      domains=tuple(d for d in corpus.domains if d in domains_here))

    return subset(train_ids), subset(valid_ids), subset(test_ids)


def write_splits(train: Corpus, valid: Corpus, test: Corpus, out_dir: str | Path) -> dict:
    """Write the three JSONL files plus the split manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_corpus(train, out_dir / "train.jsonl")
    save_corpus(valid, out_dir / "valid.jsonl")
    save_corpus(test, out_dir / "test.jsonl")
    manifest = {
        "train_events": sorted(train.event_ids),
        "valid_events": sorted(valid.event_ids),
        "test_events": sorted(test.event_ids),
    }
    with (out_dir / "split_manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a bias-controlled corpus with a planted token-label shortcut.

    Every train event plants a fresh hashtag token tied to a target label;
    valid/test events reuse those tokens. Within an event, the conditional
    frequency of the target label among token-carrying posts is ``rho_train``
    (train events) or ``rho_test`` (valid/test events), so ``rho_train !=
    rho_test`` creates a distribution shift in the shortcut while the per-label
    signal tokens stay predictive everywhere.
    """

    n_labels: int = 4
    n_domains: int = 4
    events_per_split: tuple[int, int, int] = (12, 3, 4)
    posts_per_event: int = 100
    rho_train: float = 0.9
    rho_test: float = 0.0
    rho_valid: float | None = None  # defaults to rho_test (valid is future too)
    vocab_size: int = 200
    carrier_rate: float = 0.7
    signal_noise: float = 0.1
    signal_tokens_per_label: int = 6
    signals_per_post: int = 2
    fillers_per_post: int = 4
    filler_leak_rate: float = 0.35
    numeral_rate: float = 0.1
    domain_weights: tuple[float, ...] | None = (0.5, 0.25, 0.15, 0.1)

    def validate(self) -> None:
        rhos = [self.rho_train, self.rho_test,
                self.rho_test if self.rho_valid is None else self.rho_valid]
        if any(r < 0.0 or r > 1.0 for r in rhos):
            raise CorpusError("rho values must lie in [0, 1]")
        if not 0.0 <= self.carrier_rate <= 1.0:
            raise CorpusError("carrier_rate must lie in [0, 1]")
        if self.posts_per_event < 1:
            raise CorpusError("posts_per_event must be >= 1")
        if self.n_labels < 2:
            raise CorpusError("need at least 2 labels")
        if self.n_domains < 1:
            raise CorpusError("need at least 1 domain")
        if self.events_per_split[0] < self.n_domains:
            raise CorpusError("need at least one train event per domain")
        if min(self.events_per_split) < 1:
            raise CorpusError("every split needs at least one event")
        if self.vocab_size < 1:
            raise CorpusError("vocab_size must be >= 1")
        if self.domain_weights is not None and len(self.domain_weights) != self.n_domains:
            raise CorpusError("domain_weights length must equal n_domains")


def _assign_domains(spec: SyntheticSpec, n_train: int) -> list[int]:
    weights = spec.domain_weights or tuple([1.0] * spec.n_domains)
    total = sum(weights)
    counts = [max(1, round(w / total * n_train)) for w in weights]
    while sum(counts) > n_train:
        counts[counts.index(max(counts))] -= 1
    while sum(counts) < n_train:
        counts[counts.index(max(counts))] += 1
    assignment: list[int] = []
    for d, c in enumerate(counts):
        assignment.extend([d] * c)
    return assignment


def generate_synthetic_corpus(spec: SyntheticSpec, rng: random.Random) -> Corpus:
    """Emit a deterministic bias-controlled corpus; see :class:`SyntheticSpec`."""
    spec.validate()
    n_train, n_valid, n_test = spec.events_per_split
    n_events = n_train + n_valid + n_test
    rho_valid = spec.rho_test if spec.rho_valid is None else spec.rho_valid

    label_space = LabelSpace(
        task_kind=MULTI_CLASS, names=tuple(f"type{j}" for j in range(spec.n_labels)))
    domains = tuple(f"domain{d}" for d in range(spec.n_domains))
    # domain-specific signal vocabularies: informative inside the domain,
    # leaked into other domains as uninformative filler
    signal_vocab = [[
        [f"sig_d{d}_l{j}_{i}" for i in range(spec.signal_tokens_per_label)]
        for j in range(spec.n_labels)]
        for d in range(spec.n_domains)]
    filler_vocab = [f"w{i}" for i in range(spec.vocab_size)]

    train_domains = _assign_domains(spec, n_train)
    event_domain = list(train_domains)
    for k in range(n_valid + n_test):
        event_domain.append(k % spec.n_domains)

    planted_token = [f"#ev{k}" for k in range(n_train)]
    planted_target = [k % spec.n_labels for k in range(n_train)]
    # future events reuse train shortcuts so a learned shortcut can mislead
    for k in range(n_valid + n_test):
        planted_token.append(planted_token[k % n_train])
        planted_target.append(planted_target[k % n_train])

    base_time = datetime(2020, 1, 1, tzinfo=timezone.utc)
    posts: list[Post] = []
    for k in range(n_events):
        if k < n_train:
            rho = spec.rho_train
        elif k < n_train + n_valid:
            rho = rho_valid
        else:
            rho = spec.rho_test
        d = event_domain[k]
        token, target = planted_token[k], planted_target[k]
        others = [j for j in range(spec.n_labels) if j != target]
        for i in range(spec.posts_per_event):
            carrier = rng.random() < spec.carrier_rate
            if carrier:
                label = target if rng.random() < rho else rng.choice(others)
            else:
                label = rng.randrange(spec.n_labels)

            signal_label = label
            if rng.random() < spec.signal_noise:
                signal_label = rng.choice([j for j in range(spec.n_labels) if j != label])
            words = rng.sample(signal_vocab[d][signal_label],
                               min(spec.signals_per_post, spec.signal_tokens_per_label))
            for _ in range(spec.fillers_per_post):
                if spec.n_domains > 1 and rng.random() < spec.filler_leak_rate:
                    other_d = rng.choice([x for x in range(spec.n_domains) if x != d])
                    words.append(rng.choice(signal_vocab[other_d][rng.randrange(spec.n_labels)]))
                else:
                    words.append(rng.choice(filler_vocab))
            if rng.random() < spec.numeral_rate:
                words.append(str(rng.randrange(1000)))
            rng.shuffle(words)
            if carrier:
                words.insert(rng.randrange(len(words) + 1), token)

            posts.append(Post(
                id=f"p{k:03d}_{i:05d}",
                text=" ".join(words),
                tokens=tuple(words),
                labels=frozenset({label}),
                event_id=f"ev{k:03d}",
                domain=domains[d],
                timestamp=base_time + timedelta(days=k, minutes=i),
            ))
    return Corpus(posts=posts, label_space=label_space, domains=domains)


def planted_cooccurrence(corpus: Corpus, event_ids: Iterable[str] | None = None) -> float:
    """Empirical P(target label | planted token present) over hashtag carriers.

    The synthetic generator's planted tokens are ``#ev<k>`` with target label
    ``k mod l``; this measures the realized shortcut strength for auditing.
    """
    wanted = set(event_ids) if event_ids is not None else None
    carriers = 0
    hits = 0
    n_labels = len(corpus.label_space)
    for post in corpus.posts:
        if wanted is not None and post.event_id not in wanted:
            continue
        for tok in post.tokens:
            if tok.startswith("#ev"):
                target = int(tok[3:]) % n_labels
                carriers += 1
                hits += int(target in post.labels)
                break
    if carriers == 0:
        raise CorpusError("no planted-token carriers found")
    return hits / carriers
