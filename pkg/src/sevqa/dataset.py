"""QA-record I/O, nested stage partitioning, splits, and synthetic corpora.

File format is MAQA-shaped JSONL: one UTF-8 JSON object per line with
"question", "answer" and an optional lowercase "severity" field. Record
ids are positional (0..N-1 in file order) and are reassigned on load, so
writing and re-loading a corpus is the identity modulo ids.

The stage partition follows the cumulative-union scheme: stage 1 holds the
mild records, stage 2 adds the moderate ones, stage 3 is the full training
split.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .arabic import normalize
from .seeding import derive_seed
from .severity import Lexicon, Severity, classify, default_lexicon

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """Bad JSONL line; message carries the 1-based line number."""


class MissingLabel(ValueError):
    def __init__(self, record_id: int):
        super().__init__(f"record {record_id} has no severity label")
        self.record_id = record_id


@dataclass(frozen=True)
class QaRecord:
    question: str
    answer: str
    severity: Severity | None = None
    id: int = -1


@dataclass(frozen=True)
class SeverityStats:
    mild: int = 0
    moderate: int = 0
    critical: int = 0
    unlabeled: int = 0

    @property
    def total(self) -> int:
        return self.mild + self.moderate + self.critical

    def as_dict(self) -> dict:
        return {
            "mild": self.mild,
            "moderate": self.moderate,
            "critical": self.critical,
            "unlabeled": self.unlabeled,
            "total": self.total,
        }


@dataclass(frozen=True)
class StagePartition:
    """Nested training subsets d1 (mild) ⊆ d2 (+moderate) ⊆ d3 (all)."""

    d1: frozenset[int]
    d2: frozenset[int]
    d3: frozenset[int]

    def stage_ids(self, k: int) -> frozenset[int]:
        return (self.d1, self.d2, self.d3)[k - 1]


def load_jsonl(path: str | Path) -> list[QaRecord]:
    """Read records in file order, assigning ids 0..N-1.

    Raises :class:`ParseError` with the offending line number for malformed
    JSON, missing/empty fields, or unknown severity strings.
    """
    records: list[QaRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"line {lineno}: expected a JSON object")
            try:
                question = obj["question"]
                answer = obj["answer"]
            except KeyError as exc:
                raise ParseError(f"line {lineno}: missing field {exc}") from None
            if not isinstance(question, str) or not isinstance(answer, str):
                raise ParseError(f"line {lineno}: question/answer must be strings")
            if not normalize(question) or not normalize(answer):
                raise ParseError(f"line {lineno}: question/answer empty after normalization")
            severity = None
            if "severity" in obj and obj["severity"] is not None:
                try:
                    severity = Severity.from_label(str(obj["severity"]))
                except ValueError:
                    raise ParseError(
                        f"line {lineno}: unknown severity {obj['severity']!r}"
                    ) from None
            records.append(
                QaRecord(question=question, answer=answer, severity=severity, id=len(records))
            )
    return records


def write_jsonl(records: Iterable[QaRecord], path: str | Path) -> None:
    """Inverse of :func:`load_jsonl` modulo the positional id field."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj: dict = {"question": rec.question, "answer": rec.answer}
            if rec.severity is not None:
                obj["severity"] = rec.severity.label
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def stats(records: Sequence[QaRecord]) -> SeverityStats:
    counts = {s: 0 for s in Severity}
    unlabeled = 0
    for rec in records:
        if rec.severity is None:
            unlabeled += 1
        else:
            counts[rec.severity] += 1
    return SeverityStats(
        mild=counts[Severity.MILD],
        moderate=counts[Severity.MODERATE],
        critical=counts[Severity.CRITICAL],
        unlabeled=unlabeled,
    )


def stage_split(records: Sequence[QaRecord]) -> StagePartition:
    """Partition a fully annotated corpus into the nested stage id sets."""
    mild, moderate, critical = set(), set(), set()
    for rec in records:
        if rec.severity is None:
            raise MissingLabel(rec.id)
        if rec.severity is Severity.MILD:
            mild.add(rec.id)
        elif rec.severity is Severity.MODERATE:
            moderate.add(rec.id)
        else:
            critical.add(rec.id)
    d1 = frozenset(mild)
    d2 = frozenset(mild | moderate)
    d3 = frozenset(mild | moderate | critical)
    return StagePartition(d1=d1, d2=d2, d3=d3)


def train_eval_split(
    records: Sequence[QaRecord], train_fraction: float, seed: int
) -> tuple[list[QaRecord], list[QaRecord]]:
    """Stratified split: shuffle within each tier, floor split for train.

    Deterministic for a fixed seed; a tier with fewer than 2 records goes
    entirely to train (with a warning). Unlabeled records form their own
    stratum. The returned lists keep the original record ids.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    strata: dict[object, list[QaRecord]] = {}
    for rec in records:
        strata.setdefault(rec.severity, []).append(rec)
    train: list[QaRecord] = []
    evals: list[QaRecord] = []
    order = [Severity.MILD, Severity.MODERATE, Severity.CRITICAL, None]
    for i, key in enumerate(order):
        group = strata.get(key)
        if not group:
            continue
        if len(group) < 2:
            label = key.label if key is not None else "unlabeled"
            log.warning("tier %s has %d record(s); placing in train", label, len(group))
            train.extend(group)
            continue
        rng = random.Random(derive_seed(seed, "split", i))
        shuffled = list(group)
        rng.shuffle(shuffled)
        cut = int(len(shuffled) * train_fraction)
        train.extend(shuffled[:cut])
        evals.extend(shuffled[cut:])
    train.sort(key=lambda r: r.id)
    evals.sort(key=lambda r: r.id)
    return train, evals


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

# Question templates are tier-neutral; the sampled symptom phrase alone
# determines the label. Template words must not collide with any lexicon
# phrase, otherwise generated records would not re-classify to their tier.
_QUESTION_TEMPLATES = (
    "اعاني من {s} منذ يومين فهل الامر خطير",
    "عندي {s} ولا اعرف ماذا افعل",
    "هل {s} يستدعي مراجعه الطبيب",
)

_ANSWER_TEMPLATES = {
    Severity.MILD: (
        "{s} عرض بسيط يزول مع الراحه",
        "لا تقلق {s} حاله خفيفه وتتحسن سريعا",
    ),
    Severity.MODERATE: (
        "راجع الطبيب خلال ايام اذا استمر {s}",
        "قد يحتاج {s} فحصا عند الطبيب فراقب الحاله",
    ),
    Severity.CRITICAL: (
        "توجه الي الطوارئ فورا فقد يكون {s} خطيرا",
        "اتصل بالاسعاف حالا بسبب {s} فهي حاله طارئه",
    ),
}


def synth_generate(
    n_per_tier: int, seed: int, lexicon: Lexicon | None = None
) -> list[QaRecord]:
    """Generate a templated desk-scale corpus, n_per_tier records per tier.

    Symptom phrases are sampled from the lexicon tier itself, so every
    generated question re-classifies to its generating tier. Deterministic
    per seed.
    """
    if n_per_tier < 1:
        raise ValueError("n_per_tier must be >= 1")
    lex = lexicon if lexicon is not None else default_lexicon()
    records: list[QaRecord] = []
    for tier in (Severity.MILD, Severity.MODERATE, Severity.CRITICAL):
        rng = random.Random(derive_seed(seed, "synth", tier.label))
        phrases = lex.phrases(tier)
        answers = _ANSWER_TEMPLATES[tier]
        for _ in range(n_per_tier):
            symptom = " ".join(rng.choice(phrases))
            question = rng.choice(_QUESTION_TEMPLATES).format(s=symptom)
            answer = rng.choice(answers).format(s=symptom)
            records.append(
                QaRecord(question=question, answer=answer, severity=tier, id=len(records))
            )
    return records


def verify_synth_consistency(records: Sequence[QaRecord], lexicon: Lexicon | None = None) -> bool:
    """True iff every record's question classifies back to its stored tier."""
    lex = lexicon if lexicon is not None else default_lexicon()
    return all(classify(rec.question, lex) is rec.severity for rec in records)
