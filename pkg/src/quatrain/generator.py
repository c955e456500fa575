"""Beam-search generation of whole quatrains with form-constraint pruning.

A poem is generated line by line with the clue threaded exactly as in
training: line 1 from the keyword with an empty clue, each later line from
its predecessor, and after every generated line the salient characters of
the preceding line are selected and folded into the clue.

Form constraints run inside the search: during line 1 every hypothesis
tracks which tone templates it can still complete; afterwards the template
consistent with the best line-1 hypothesis is committed and lines 2-4 are
pruned against it, with the rhyme group fixed by line 2's final character.
Characters the lexicon does not know are wildcards, never violations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import (BOS, EOS, FORM_LENGTH, PAD, UNK, TfIdfTable, ToneLexicon,
                     TONE_UNKNOWN, Vocabulary, tfidf_line)
from .model import (AttentionTrace, ClueState, ExtensionVector, K_BY_FORM,
                    Model, saliency_naive, saliency_tfidf, select_salient)

TONE_ANY = "A"

# Classical tone skeletons; position 1 (and 3 for seven-character lines)
# is left free, the cadence and rhyme positions are strict. Lines 2 and 4
# end level-toned and rhyme; line 1 may join the rhyme but need not.
DEFAULT_TEMPLATES = {
    "wujue": [
        ("AZPPZ", "APZZP", "APPZZ", "AZZPP"),
        ("AZZPP", "APZZP", "APPZZ", "AZZPP"),
        ("APPZZ", "AZZPP", "AZPPZ", "APZZP"),
        ("APZZP", "AZZPP", "AZPPZ", "APZZP"),
    ],
    "qijue": [
        ("APAZPPZ", "AZAPZZP", "AZAPPZZ", "APAZZPP"),
        ("APAZZPP", "AZAPZZP", "AZAPPZZ", "APAZZPP"),
        ("AZAPPZZ", "APAZZPP", "APAZPPZ", "AZAPZZP"),
        ("AZAPZZP", "APAZZPP", "APAZPPZ", "AZAPZZP"),
    ],
}

RHYME_LINES = (1, 3)  # 0-based lines whose final characters must rhyme


class GenerationError(RuntimeError):
    pass


@dataclass
class PatternTable:
    """Legal tone templates per form plus the rhyme rule."""

    templates: dict[str, list[tuple[str, ...]]] = field(
        default_factory=lambda: {f: list(t) for f, t in DEFAULT_TEMPLATES.items()})

    def __post_init__(self):
        for form, templates in self.templates.items():
            if not templates:
                raise ValueError(f"form {form!r} has no templates")
            n = FORM_LENGTH[form]
            for tpl in templates:
                if len(tpl) != 4 or any(len(line) != n for line in tpl):
                    raise ValueError(f"template {tpl} does not fit form {form!r}")

    def for_form(self, form: str) -> list[tuple[str, ...]]:
        return self.templates[form]


def tone_allowed(char: str, required: str, lexicon: ToneLexicon) -> bool:
    """Unknown tones are wildcards; 'A' accepts anything."""
    if required == TONE_ANY:
        return True
    tone = lexicon.tone(char)
    return tone == TONE_UNKNOWN or tone == required


@dataclass
class Hypothesis:
    """One partial line in the beam."""

    chars: str
    log_prob: float
    state_index: int = 0   # row in the decode session this hypothesis owns


def prune_beam(hypotheses: list[Hypothesis], position: int,
               template: tuple[str, ...], lexicon: ToneLexicon,
               line_index: int,
               committed_rhyme: int | None = None) -> list[Hypothesis]:
    """Drop hypotheses whose newest character breaks the template tone at
    this position, or the committed rhyme group at the final position of a
    rhyming line. Survivors keep their order."""
    required = template[line_index][position]
    is_rhyme_pos = (line_index in RHYME_LINES
                    and position == len(template[line_index]) - 1)
    out = []
    for hyp in hypotheses:
        ch = hyp.chars[position]
        if not tone_allowed(ch, required, lexicon):
            continue
        if is_rhyme_pos and committed_rhyme is not None and line_index == 3:
            group = lexicon.rhyme_group(ch)
            if group is not None and group != committed_rhyme:
                continue
        out.append(hyp)
    return out


# ---------------------------------------------------------------------------
# form checking


@dataclass
class FormReport:
    length_ok: bool
    tone_ok: bool
    rhyme_ok: bool
    template_index: int | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return self.length_ok and self.tone_ok and self.rhyme_ok

    def to_dict(self) -> dict:
        return {"length_ok": self.length_ok, "tone_ok": self.tone_ok,
                "rhyme_ok": self.rhyme_ok, "template_index": self.template_index,
                "notes": self.notes}


def check_form(lines: list[str], form: str, lexicon: ToneLexicon,
               patterns: PatternTable | None = None) -> FormReport:
    """Report length, joint tone-template and rhyme conformance."""
    patterns = patterns or PatternTable()
    n = FORM_LENGTH[form]
    notes = []
    length_ok = len(lines) == 4 and all(len(line) == n for line in lines)
    if not length_ok:
        notes.append(f"expected 4 lines of {n} characters")

    tone_ok = False
    template_index = None
    if length_ok:
        for idx, tpl in enumerate(patterns.for_form(form)):
            if all(tone_allowed(ch, tpl[i][j], lexicon)
                   for i, line in enumerate(lines)
                   for j, ch in enumerate(line)):
                tone_ok = True
                template_index = idx
                break
        if not tone_ok:
            notes.append("no tone template matches all four lines")

    rhyme_ok = True
    if length_ok:
        groups = [lexicon.rhyme_group(lines[i][-1]) for i in RHYME_LINES]
        if all(g is not None for g in groups) and len(set(groups)) > 1:
            rhyme_ok = False
            notes.append(f"lines 2 and 4 end in rhyme groups {groups[0]} vs {groups[1]}")
        g1 = lexicon.rhyme_group(lines[0][-1])
        if g1 is not None and groups[1] is not None and g1 != groups[1]:
            notes.append("line 1 does not join the rhyme (allowed)")
    return FormReport(length_ok=length_ok, tone_ok=tone_ok, rhyme_ok=rhyme_ok,
                      template_index=template_index, notes=notes)


# ---------------------------------------------------------------------------
# beam search


def _beam_line(model: Model, enc_states: Tensor, src_mask, clue: ClueState,
               ext, length: int, beam_width: int,
               char_mask_fn=None, forbidden_ids=()):
    """Beam search for one line over a single-poem conditioning context.

    char_mask_fn(position, tokens_so_far) may return a boolean vocab mask
    of admissible next characters (new hypotheses violating it never enter
    the beam). Returns (token matrix row of the best hypothesis, its log
    probability, its attention rows, final ranked token matrix + scores).
    Ties break toward ascending character id, then ascending parent index.
    """
    v = model.cfg.vocab_size
    w = beam_width
    if w < 1:
        raise GenerationError("beam width must be >= 1")

    def tile(t: Tensor) -> Tensor:
        return Tensor(np.repeat(t.data, w, axis=0))

    enc_w = tile(enc_states)
    mask_w = None if src_mask is None else np.repeat(src_mask, w, axis=0)
    clue_w = ClueState(clue.mode, tile(clue.v), clue.line_index,
                       clue.capacity,
                       None if clue.cursor is None else np.repeat(clue.cursor, w))
    ext_w = None
    if ext is not None:
        ext_w = ExtensionVector(ext.kind, tile(ext.vec))

    session = model.decode_session(enc_w, clue_w, ext_w, src_mask=mask_w)
    tokens = np.zeros((w, 0), dtype=int)
    logp = np.full(w, -np.inf)
    logp[0] = 0.0  # identical start rows: only one may seed the beam
    prev = np.full(w, BOS, dtype=int)
    banned = np.zeros(v, dtype=bool)
    for t in forbidden_ids:
        banned[t] = True

    for pos in range(length):
        res = session.step(prev)
        step_logp = ad.log_softmax(res.logits).data      # (W, V)
        cand = logp[:, None] + step_logp
        cand[:, banned] = -np.inf
        if char_mask_fn is not None:
            allowed = char_mask_fn(pos, tokens)          # (V,) or (W, V)
            cand = np.where(allowed, cand, -np.inf)
        flat = cand.reshape(-1)
        if not np.isfinite(flat.max()):
            raise GenerationError(
                f"beam exhausted at position {pos}: no admissible character")
        parent, token = np.divmod(np.arange(flat.size), v)
        order = np.lexsort((parent, token, -flat))[:w]
        picked_parent, picked_token = parent[order], token[order]
        logp = flat[order]
        tokens = np.concatenate(
            [tokens[picked_parent], picked_token[:, None]], axis=1)
        session.reorder(picked_parent)
        prev = picked_token

    rows = np.stack([r.data[0] for r in session.rows], axis=0)  # (T, S) of best
    return tokens[0], float(logp[0]), rows, tokens, logp


@dataclass
class SaliencyEntry:
    line: int                # 1-based line whose generation produced the trace
    source_line: int         # the line the indices point into
    indices: list[int]
    scores: list[float]
    selected_chars: list[str]
    used_in_clue: bool

    def to_dict(self) -> dict:
        return {"line": self.line, "source_line": self.source_line,
                "indices": self.indices, "scores": self.scores,
                "selected_chars": self.selected_chars,
                "used_in_clue": self.used_in_clue}


@dataclass
class GeneratedPoem:
    lines: list[str]
    form: str
    keyword: str
    style: str | None
    log_prob: float
    saliency: list[SaliencyEntry]
    form_check: FormReport | None
    template_index: int | None
    constraints: bool
    beam_width: int
    clue_mode: str
    ext_kinds: str
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "lines": self.lines,
            "form": self.form,
            "keyword": self.keyword,
            "style": self.style,
            "log_prob": self.log_prob,
            "saliency": [e.to_dict() for e in self.saliency],
            "form_check": None if self.form_check is None else self.form_check.to_dict(),
            "template_index": self.template_index,
            "constraints": "on" if self.constraints else "off",
            "beam": self.beam_width,
            "clue": self.clue_mode,
            "ext": self.ext_kinds,
            "seed": self.seed,
        }


def _vocab_tone_tables(vocab: Vocabulary, lexicon: ToneLexicon):
    tones = np.array([lexicon.tone(vocab.char(i)) for i in range(len(vocab))])
    groups = np.array([
        -1 if lexicon.rhyme_group(vocab.char(i)) is None
        else lexicon.rhyme_group(vocab.char(i))
        for i in range(len(vocab))
    ])
    return tones, groups


def generate_poem(model: Model, vocab: Vocabulary, tfidf: TfIdfTable,
                  keyword: str, form: str, style: str | None = None,
                  beam_width: int = 20, constraints: bool = False,
                  lexicon: ToneLexicon | None = None,
                  patterns: PatternTable | None = None,
                  seed: int | None = None) -> GeneratedPoem:
    """Generate one quatrain from a keyword; deterministic given the
    checkpoint and settings. With constraints on, the output is guaranteed
    to pass check_form (or a GenerationError names the failing line)."""
    from .trainer import STYLE_TO_ID

    cfg = model.cfg
    if form not in FORM_LENGTH:
        raise GenerationError(f"unknown form {form!r}")
    if constraints and lexicon is None:
        raise GenerationError("constraints require a tone lexicon")
    t = FORM_LENGTH[form]
    k = K_BY_FORM[form]
    patterns = patterns or PatternTable()
    templates = patterns.for_form(form)

    keyword_ids = np.array([vocab.encode(keyword)])
    kw_mask = np.ones_like(keyword_ids, dtype=float)
    kw_states = model.encode(keyword_ids, mask=kw_mask)

    intent = style_vec = None
    if "intent" in cfg.ext_kinds:
        intent = model.make_intent_vector(kw_states, mask=kw_mask)
    if "style" in cfg.ext_kinds:
        style_vec = model.make_style_vector(
            np.array([STYLE_TO_ID[style or "none"]]))
    ext = model.combine_extensions(intent, style_vec)

    forbidden = (PAD, BOS, EOS, UNK)
    tone_by_id = group_by_id = None
    if constraints:
        tone_by_id, group_by_id = _vocab_tone_tables(vocab, lexicon)

    def tone_mask(required: str) -> np.ndarray:
        if required == TONE_ANY:
            return np.ones(len(vocab), dtype=bool)
        return (tone_by_id == required) | (tone_by_id == TONE_UNKNOWN)

    # line 1: hypotheses must stay completable under at least one template
    committed: int | None = None
    committed_rhyme: int | None = None

    clue = model.clue_init(1, form)
    lines_ids: list[np.ndarray] = []
    log_prob = 0.0
    saliency: list[SaliencyEntry] = []

    def run_line(index: int, enc, mask, mask_fn):
        nonlocal log_prob
        try:
            ids, lp, rows, all_tokens, all_logp = _beam_line(
                model, enc, mask, clue, ext, t, beam_width,
                char_mask_fn=mask_fn, forbidden_ids=forbidden)
        except GenerationError as err:
            tpl = "any" if committed is None else str(committed)
            raise GenerationError(
                f"line {index}: {err} (template {tpl}); retry with "
                f"constraints off or a larger beam") from None
        log_prob += lp
        return ids, rows

    def track_templates(pos, tokens):
        # recompute per-hypothesis admissible templates from their prefixes
        live = tokens.shape[0]
        bits = np.zeros(live, dtype=int)
        for b, tpl in enumerate(templates):
            ok = np.ones(live, dtype=bool)
            for j in range(tokens.shape[1]):
                ok &= tone_mask(tpl[0][j])[tokens[:, j]]
            bits |= ok.astype(int) << b
        char_bits = np.zeros(len(vocab), dtype=int)
        for b, tpl in enumerate(templates):
            char_bits |= tone_mask(tpl[0][pos]).astype(int) << b
        return (bits[:, None] & char_bits[None, :]) != 0

    line1, _rows1 = run_line(1, kw_states, kw_mask,
                             track_templates if constraints else None)
    lines_ids.append(line1)
    if constraints:
        for idx, tpl in enumerate(templates):
            if all(tone_mask(tpl[0][j])[line1[j]] for j in range(t)):
                committed = idx
                break
        if committed is None:
            raise GenerationError("line 1 matches no tone template")

    for i in range(2, 5):
        source = lines_ids[-1]
        src_states = model.encode(source[None, :])

        def mask_fn(pos, tokens, _line=i - 1):
            allowed = tone_mask(templates[committed][_line][pos])
            if _line == 3 and pos == t - 1 and committed_rhyme is not None:
                allowed = allowed & ((group_by_id == committed_rhyme)
                                     | (group_by_id == -1))
            return allowed

        ids, rows = run_line(i, src_states, None,
                             mask_fn if constraints else None)
        if i == 2 and constraints:
            g = lexicon.rhyme_group(vocab.char(ids[-1]))
            committed_rhyme = g
        lines_ids.append(ids)

        trace = AttentionTrace(matrix=Tensor(rows[None, :, :]),
                               enc_states=src_states)
        if cfg.saliency == "tfidf":
            w_in = np.array([tfidf_line(list(source), tfidf)])
            w_out = np.array([tfidf_line(list(ids), tfidf)])
            scores = saliency_tfidf(trace, w_in, w_out)
        else:
            scores = saliency_naive(trace)
        n_sel, picked = select_salient(scores.data[0], k)
        clue = model.update_clue(clue, [picked], scores, src_states)
        saliency.append(SaliencyEntry(
            line=i, source_line=i - 1, indices=picked,
            scores=[float(x) for x in scores.data[0]],
            selected_chars=[vocab.char(source[j]) for j in picked],
            used_in_clue=i < 4))

    lines = [vocab.decode(ids) for ids in lines_ids]
    report = None
    if lexicon is not None:
        report = check_form(lines, form, lexicon, patterns)
    return GeneratedPoem(
        lines=lines, form=form, keyword=keyword, style=style,
        log_prob=log_prob, saliency=saliency, form_check=report,
        template_index=committed, constraints=constraints,
        beam_width=beam_width, clue_mode=cfg.clue_mode,
        ext_kinds=cfg.ext_kinds, seed=seed)
