"""Rule-based severity annotation for Arabic medical questions.

A question is assigned one of three urgency levels (mild, moderate,
critical) by matching a curated keyword lexicon against its normalized,
whitespace-tokenized text. Matching is token-contiguous rather than raw
substring: Arabic clitics (e.g. the ب in "بالم") make substring matching
fire inside unrelated longer words. When phrases from several tiers match
the same question, the highest tier wins; a question matching nothing is
mild by default.

The shipped default lexicon is a reconstruction seeded from the tier
descriptions (emergency symptoms -> critical, fever/vomiting/persistent
pain -> moderate, headache/cold/minor discomfort -> mild) and extended to
roughly 30 folded phrases per tier. Lexicon authors should write folded
forms (see :mod:`sevqa.arabic`); the loader re-normalizes defensively.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .arabic import normalize, tokenize_whitespace

log = logging.getLogger(__name__)

MAX_PHRASE_TOKENS = 5

Phrase = tuple[str, ...]


class Severity(enum.IntEnum):
    """Urgency tiers; comparison follows priority critical > moderate > mild."""

    MILD = 0
    MODERATE = 1
    CRITICAL = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Severity":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ValueError(f"unknown severity label: {label!r}") from None


class LexiconError(ValueError):
    """Malformed lexicon document."""


class ParseError(LexiconError):
    pass


class DuplicateAcrossTiers(LexiconError):
    def __init__(self, phrase: str):
        super().__init__(f"phrase appears in more than one tier: {phrase!r}")
        self.phrase = phrase


@dataclass(frozen=True)
class Lexicon:
    """Three disjoint tiers of pre-folded keyword phrases (1..5 tokens each)."""

    tiers: Mapping[Severity, tuple[Phrase, ...]]

    def phrases(self, tier: Severity) -> tuple[Phrase, ...]:
        return self.tiers[tier]

    def __len__(self) -> int:
        return sum(len(p) for p in self.tiers.values())


@dataclass
class MatchResult:
    """All keyword hits in one question plus the resolved label."""

    matches: list[tuple[Phrase, Severity, int]] = field(default_factory=list)
    resolved: Severity = Severity.MILD


def load_lexicon(source: Mapping | str | Path) -> Lexicon:
    """Build a :class:`Lexicon` from a JSON document or an already-parsed dict.

    Phrases are normalized and tokenized; duplicates within a tier are
    dropped silently, duplicates across tiers raise
    :class:`DuplicateAcrossTiers`. An empty tier is allowed but logged.
    """
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read lexicon {source}: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, Mapping):
        raise ParseError("lexicon document must be a JSON object")

    tiers: dict[Severity, tuple[Phrase, ...]] = {}
    seen: dict[Phrase, Severity] = {}
    for tier in (Severity.CRITICAL, Severity.MODERATE, Severity.MILD):
        raw = doc.get(tier.label)
        if raw is None:
            raise ParseError(f"lexicon document missing tier {tier.label!r}")
        if not isinstance(raw, list) or not all(isinstance(p, str) for p in raw):
            raise ParseError(f"tier {tier.label!r} must be an array of strings")
        phrases: list[Phrase] = []
        for entry in raw:
            tokens = tuple(tokenize_whitespace(normalize(entry)))
            if not tokens:
                raise ParseError(f"phrase normalizes to nothing: {entry!r}")
            if len(tokens) > MAX_PHRASE_TOKENS:
                raise ParseError(
                    f"phrase longer than {MAX_PHRASE_TOKENS} tokens: {entry!r}"
                )
            if tokens in phrases:
                continue
            if tokens in seen:
                raise DuplicateAcrossTiers(" ".join(tokens))
            seen[tokens] = tier
            phrases.append(tokens)
        if not phrases:
            log.warning("lexicon tier %s is empty", tier.label)
        tiers[tier] = tuple(phrases)
    return Lexicon(tiers=tiers)


def default_lexicon() -> Lexicon:
    """The lexicon shipped with the package (a documented reconstruction)."""
    doc = json.loads(
        resources.files("sevqa.data").joinpath("default_lexicon.json").read_text(
            encoding="utf-8"
        )
    )
    return load_lexicon(doc)


def match_keywords(tokens: Sequence[str], lexicon: Lexicon) -> MatchResult:
    """Collect every contiguous phrase occurrence; resolve to the max tier."""
    matches: list[tuple[Phrase, Severity, int]] = []
    n = len(tokens)
    for offset in range(n):
        for tier in (Severity.CRITICAL, Severity.MODERATE, Severity.MILD):
            for phrase in lexicon.phrases(tier):
                k = len(phrase)
                if offset + k <= n and tuple(tokens[offset : offset + k]) == phrase:
                    matches.append((phrase, tier, offset))
    resolved = max((t for _, t, _ in matches), default=Severity.MILD)
    return MatchResult(matches=matches, resolved=resolved)


def classify(question: str, lexicon: Lexicon) -> Severity:
    """Severity of one question: normalize, tokenize, match, resolve."""
    return match_keywords(tokenize_whitespace(normalize(question)), lexicon).resolved


def annotate_dataset(records: Iterable, lexicon: Lexicon, keep_existing: bool = False):
    """Label every record's question; returns (new records, SeverityStats).

    Input order is preserved and the input records are left untouched.
    Existing labels are overwritten unless ``keep_existing`` is set.
    """
    from .dataset import SeverityStats

    out = []
    counts = {s: 0 for s in Severity}
    for rec in records:
        sev = rec.severity
        if sev is None or not keep_existing:
            sev = classify(rec.question, lexicon)
        out.append(replace(rec, severity=sev))
        counts[sev] += 1
    stats = SeverityStats(
        mild=counts[Severity.MILD],
        moderate=counts[Severity.MODERATE],
        critical=counts[Severity.CRITICAL],
    )
    return out, stats
