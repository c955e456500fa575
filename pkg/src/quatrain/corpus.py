"""Corpus ingestion, vocabulary, tf-idf statistics and the tone lexicon.

Corpus file format: UTF-8 text, one poem per line, the four lines joined
by "|". Optional tab-separated trailing columns: style (one of pastoral,
battlefield, romantic, none, or "-" for unannotated) and then a keyword.
Lines starting with "#" are comments.

Tone lexicon: UTF-8 TSV with columns character, tone (P|Z), rhyme-group
integer (empty allowed).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

FORM_LENGTH = {"wujue": 5, "qijue": 7}
STYLES = ("pastoral", "battlefield", "romantic", "none")

TONE_PING = "P"
TONE_ZE = "Z"
TONE_UNKNOWN = "?"


class CorpusError(ValueError):
    pass


class Vocabulary:
    """Character <-> id bijection with reserved ids 0..3."""

    def __init__(self, chars):
        self._chars = list(RESERVED) + list(chars)
        self._ids = {c: i for i, c in enumerate(self._chars)}
        if len(self._ids) != len(self._chars):
            raise CorpusError("duplicate characters in vocabulary")

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        """Ids assigned by descending frequency, then codepoint."""
        counts = Counter()
        for text in texts:
            counts.update(text)
        chars = sorted(counts, key=lambda c: (-counts[c], c))
        return cls(chars)

    def __len__(self):
        return len(self._chars)

    def __contains__(self, char):
        return char in self._ids

    def id(self, char: str) -> int:
        return self._ids.get(char, UNK)

    def char(self, i: int) -> str:
        return self._chars[i]

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(c, UNK) for c in text]

    def decode(self, ids) -> str:
        return "".join(self._chars[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps(self._chars[len(RESERVED):], ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        return cls(json.loads(payload))


@dataclass
class Poem:
    """A quatrain: four equal-length lines of character ids."""

    form: str
    lines: list[list[int]]
    style: str | None = None     # None = unannotated, "none" = non-style class
    keyword: list[int] | None = None

    @property
    def line_length(self) -> int:
        return FORM_LENGTH[self.form]

    def all_ids(self):
        for line in self.lines:
            yield from line

    def text(self, vocab: Vocabulary) -> str:
        return "|".join(vocab.decode(line) for line in self.lines)


@dataclass
class RejectedPoem:
    index: int
    line: int | None
    reason: str


@dataclass
class Corpus:
    poems: list[Poem]
    vocab: Vocabulary
    rejected: list[RejectedPoem] = field(default_factory=list)
    val_poems: list[Poem] = field(default_factory=list)


def _parse_poem_line(text: str, index: int):
    fields = text.split("\t")
    lines = fields[0].split("|")
    if len(lines) != 4:
        return None, RejectedPoem(index, None, f"expected 4 lines, got {len(lines)}")
    length = len(lines[0])
    form = None
    for name, n in FORM_LENGTH.items():
        if length == n:
            form = name
    if form is None:
        return None, RejectedPoem(index, 0, f"line length {length} matches no form")
    for j, line in enumerate(lines):
        if len(line) != length:
            return None, RejectedPoem(
                index, j, f"{form} line must have {length} characters, got {len(line)}"
            )
    style = None
    keyword = None
    if len(fields) > 1 and fields[1] not in ("", "-"):
        s = fields[1].strip().lower()
        if s not in STYLES:
            return None, RejectedPoem(index, None, f"unknown style {fields[1]!r}")
        style = s
    if len(fields) > 2 and fields[2]:
        keyword = fields[2]
    if len(fields) > 3:
        return None, RejectedPoem(index, None, "too many columns")
    return (form, lines, style, keyword), None


def load_corpus(path, val_count: int = 0,
                vocab: Vocabulary | None = None) -> Corpus:
    """Load a corpus file; the vocabulary is built from the training split
    only (the last `val_count` poems are held out for validation). Passing
    an existing vocabulary reuses it, mapping unseen characters to UNK."""
    raw = []
    rejected = []
    with open(path, encoding="utf-8") as fh:
        for raw_index, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parsed, reject = _parse_poem_line(line, len(raw) + len(rejected))
            if reject is not None:
                rejected.append(reject)
            else:
                raw.append(parsed)
    if not raw:
        raise CorpusError(f"no valid poems in {path}")
    if val_count >= len(raw):
        raise CorpusError(f"val_count {val_count} leaves no training poems")
    split = len(raw) - val_count
    train_raw, val_raw = raw[:split], raw[split:]
    if vocab is None:
        texts = ["".join(lines) + (keyword or "")
                 for _, lines, _, keyword in train_raw]
        vocab = Vocabulary.from_texts(texts)

    def build(entries):
        poems = []
        for form, lines, style, keyword in entries:
            poems.append(Poem(
                form=form,
                lines=[vocab.encode(line) for line in lines],
                style=style,
                keyword=vocab.encode(keyword) if keyword else None,
            ))
        return poems

    return Corpus(poems=build(train_raw), vocab=vocab, rejected=rejected,
                  val_poems=build(val_raw))


# ---------------------------------------------------------------------------
# tf-idf


class TfIdfTable:
    """Per-character idf over a poem corpus, each poem one document."""

    def __init__(self, df: dict[int, int], doc_count: int,
                 default_idf: float | None = None, tf_scope: str = "line"):
        if doc_count < 1:
            raise CorpusError("tf-idf table needs at least one document")
        if tf_scope not in ("line", "poem"):
            raise CorpusError(f"unknown tf_scope {tf_scope!r}")
        self.df = dict(df)
        self.doc_count = doc_count
        self.tf_scope = tf_scope
        # unknown characters behave like ones seen in a single document
        self.default_idf = math.log(doc_count) if default_idf is None else default_idf

    @classmethod
    def from_poems(cls, poems, default_idf=None, tf_scope="line") -> "TfIdfTable":
        df = Counter()
        for poem in poems:
            df.update(set(poem.all_ids()))
        return cls(df, len(poems), default_idf=default_idf, tf_scope=tf_scope)

    def idf(self, char_id: int) -> float:
        d = self.df.get(char_id)
        if d is None:
            return self.default_idf
        return math.log(self.doc_count / d)

    def raw_weights(self, line, context=None) -> list[float]:
        """tf(char) * idf(char) per position; tf counted within the line or,
        with tf_scope="poem", within the given context ids."""
        bag = Counter(context if (self.tf_scope == "poem" and context is not None)
                      else line)
        return [bag[c] * self.idf(c) for c in line]

    def to_manifest(self) -> dict:
        return {"df": {str(k): v for k, v in self.df.items()},
                "doc_count": self.doc_count,
                "default_idf": self.default_idf,
                "tf_scope": self.tf_scope}

    @classmethod
    def from_manifest(cls, payload: dict) -> "TfIdfTable":
        return cls({int(k): v for k, v in payload["df"].items()},
                   payload["doc_count"],
                   default_idf=payload["default_idf"],
                   tf_scope=payload["tf_scope"])


def minmax_normalize(raw) -> list[float]:
    lo, hi = min(raw), max(raw)
    if hi == lo:
        return [1.0] * len(raw)
    return [(x - lo) / (hi - lo) for x in raw]


def tfidf_line(line, table: TfIdfTable, context=None) -> list[float]:
    """Min-max normalized tf-idf weights for one line, all entries in [0,1].

    A line whose raw weights are all equal maps to all-ones, so the
    weighting degenerates to the unweighted attention-mass scores.
    """
    if not line:
        raise CorpusError("tfidf_line: empty line")
    return minmax_normalize(table.raw_weights(line, context=context))


def extract_keyword(poem: Poem, table: TfIdfTable) -> list[int]:
    """The contiguous in-line bigram maximizing summed tf-idf; ties go to the
    earliest position. Falls back to the best single character for
    single-character lines."""
    def score(c, bag):
        return bag[c] * table.idf(c)

    bag = Counter(poem.all_ids())
    best = None
    for line in poem.lines:
        if len(line) < 2:
            continue
        for j in range(len(line) - 1):
            s = score(line[j], bag) + score(line[j + 1], bag)
            if best is None or s > best[0]:
                best = (s, [line[j], line[j + 1]])
    if best is None:
        singles = [(score(c, bag), [c]) for line in poem.lines for c in line]
        best = max(singles, key=lambda t: t[0])
    return best[1]


# ---------------------------------------------------------------------------
# tone lexicon


class ToneLexicon:
    """character -> (tone, rhyme group); missing characters are Unknown."""

    def __init__(self, tones: dict[str, str], rhymes: dict[str, int],
                 duplicate_count: int = 0):
        self._tones = tones
        self._rhymes = rhymes
        self.duplicate_count = duplicate_count

    def tone(self, char: str) -> str:
        return self._tones.get(char, TONE_UNKNOWN)

    def rhyme_group(self, char: str) -> int | None:
        return self._rhymes.get(char)

    def __len__(self):
        return len(self._tones)


def load_tone_lexicon(path) -> ToneLexicon:
    """Parse the TSV lexicon; duplicate characters: last entry wins and the
    duplicate count is reported on the returned lexicon."""
    tones: dict[str, str] = {}
    rhymes: dict[str, int] = {}
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, row in enumerate(fh, start=1):
            row = row.rstrip("\n")
            if not row or row.startswith("#"):
                continue
            fields = row.split("\t")
            if len(fields) < 2:
                raise CorpusError(f"{path}:{lineno}: expected at least 2 columns")
            char, tone = fields[0], fields[1].strip().upper()
            if len(char) != 1:
                raise CorpusError(f"{path}:{lineno}: key must be one character")
            if tone not in (TONE_PING, TONE_ZE):
                raise CorpusError(f"{path}:{lineno}: tone must be P or Z, got {tone!r}")
            if char in tones:
                duplicates += 1
                rhymes.pop(char, None)
            tones[char] = tone
            if len(fields) > 2 and fields[2].strip():
                rhymes[char] = int(fields[2])
    return ToneLexicon(tones, rhymes, duplicate_count=duplicates)
