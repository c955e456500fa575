"""Training on whole poems: per-poem task chains, batching, fine-tuning.

Each poem contributes a chain of four teacher-forced decoding tasks:
keyword -> L1 with an empty clue, then L(i-1) -> Li for i = 2..4 where the
clue accumulates the salient characters selected from each decoded
transition. Batches are whole poems (grouped by form so line lengths
match); the loss is the mean over poems of per-character cross entropy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step
from .corpus import BOS, PAD, Corpus, Poem, TfIdfTable, extract_keyword, tfidf_line
from .model import (AttentionTrace, ClueState, ExtensionVector, K_BY_FORM,
                    Model, ModelConfig, saliency_naive, saliency_tfidf,
                    select_salient_batch)

STYLE_TO_ID = {"pastoral": 0, "battlefield": 1, "romantic": 2, "none": 3}
ID_TO_STYLE = {v: k for k, v in STYLE_TO_ID.items()}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 10
    max_steps: int = 0            # 0 = run all epochs
    teacher_forcing: bool = True  # scheduled sampling is not implemented
    clue_mode: str = "sdu"
    ext_kinds: str = "none"
    saliency: str = "tfidf"
    seed: int = 0
    detach_clue: bool = False
    validation_interval: int = 50
    val_count: int = 0
    tf_scope: str = "line"
    emb_dim: int = 256
    dec_hidden: int = 512
    attn_dim: int = 512
    maxout_dim: int = 512
    ssi_proj_dim: int = 100
    intent_dim: int = 128
    style_dim: int = 64
    init_scale: float = 0.08

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.teacher_forcing:
            raise ValueError("only teacher-forced training is supported")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            emb_dim=self.emb_dim,
            dec_hidden=self.dec_hidden,
            attn_dim=self.attn_dim,
            maxout_dim=self.maxout_dim,
            ssi_proj_dim=self.ssi_proj_dim,
            intent_dim=self.intent_dim,
            style_dim=self.style_dim,
            clue_mode=self.clue_mode,
            ext_kinds=self.ext_kinds,
            saliency=self.saliency,
            detach_clue=self.detach_clue,
            init_scale=self.init_scale,
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


_BOOLS = {"true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False, "on": True, "off": False}


def parse_config_file(path) -> dict:
    """Flat key=value file; '#' starts a comment. Values are converted to
    the declared type of the matching TrainConfig field."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def config_from_file(path, **overrides) -> TrainConfig:
    fields = {f: t for f, t in TrainConfig.__annotations__.items()}
    kwargs = {}
    for key, value in parse_config_file(path).items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        kind = fields[key]
        if kind == "bool" or kind is bool:
            kwargs[key] = _BOOLS[value.lower()]
        elif kind == "int" or kind is int:
            kwargs[key] = int(value)
        elif kind == "float" or kind is float:
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# chain running


@dataclass
class TaskRecord:
    """One decode task of a poem chain, after the fact."""

    index: int                      # 1..4
    source_ids: np.ndarray          # (B, S): keyword (task 1) or gold line
    target_ids: np.ndarray          # (B, T)
    trace: AttentionTrace | None = None
    scores: np.ndarray | None = None          # (B, S) saliency, tasks >= 2
    selections: list[list[int]] | None = None  # per poem, tasks >= 2
    clue_before: ClueState | None = None


@dataclass
class TrainingExampleChain:
    """The four ordered decode tasks of one poem (or one batch of poems)."""

    form: str
    tasks: list[TaskRecord]
    log_probs: Tensor               # (B,) gold log prob over all four lines
    clue_final: ClueState
    greedy_hits: int = 0            # argmax-matches-gold count, all tasks
    total_chars: int = 0


def _pad_keywords(keywords: list[list[int]]):
    width = max(len(k) for k in keywords)
    ids = np.full((len(keywords), width), PAD, dtype=int)
    mask = np.zeros((len(keywords), width))
    for i, kw in enumerate(keywords):
        ids[i, :len(kw)] = kw
        mask[i, :len(kw)] = 1.0
    return ids, mask


def _line_weights(lines: np.ndarray, tfidf: TfIdfTable) -> np.ndarray:
    return np.array([tfidf_line(list(row), tfidf) for row in lines])


def run_chain(model: Model, tfidf: TfIdfTable, form: str,
              lines: np.ndarray, keywords: list[list[int]],
              style_ids: np.ndarray | None,
              n_tasks: int = 4) -> TrainingExampleChain:
    """Teacher-forced run of the poem chain for one batch.

    lines is (B, 4, T) of gold character ids. Saliency is computed on every
    transition and the clue is updated after tasks 2..4, so the fill state
    after the final task reflects all three preceding-line selections.
    n_tasks < 4 truncates the chain (the gradient checks use 3 tasks, which
    already exercises every parameter including clue production and use).
    """
    cfg = model.cfg
    b, n_lines, t = lines.shape
    kw_ids, kw_mask = _pad_keywords(keywords)
    kw_states = model.encode(kw_ids, mask=kw_mask)

    intent = style = None
    if "intent" in cfg.ext_kinds:
        intent = model.make_intent_vector(kw_states, mask=kw_mask)
    if "style" in cfg.ext_kinds:
        if style_ids is None:
            style_ids = np.full(b, STYLE_TO_ID["none"], dtype=int)
        style = model.make_style_vector(style_ids)
    ext = model.combine_extensions(intent, style)

    # the source lines share one batched encoder run
    n_src = max(1, n_tasks - 1)
    src_states = model.encode(lines[:, :n_src, :].reshape(n_src * b, t))

    def decode_task(source_states, src_mask, targets, clue):
        session = model.decode_session(source_states, clue, ext, src_mask=src_mask)
        prev = np.full(b, BOS, dtype=int)
        step_logits = []
        for step in range(targets.shape[1]):
            res = session.step(prev)
            step_logits.append(res.logits)
            prev = targets[:, step]
        logits = ad.stack(step_logits, axis=1)                 # (B, T, V)
        logp = ad.gather_index(ad.log_softmax(logits), targets)
        hits = int((logits.data.argmax(axis=-1) == targets).sum())
        return session, ad.sum_(logp, axis=1), hits

    clue = model.clue_init(b, form)
    k = K_BY_FORM[form]
    tasks = []
    log_prob = None
    greedy_hits = 0

    for i in range(1, n_tasks + 1):
        if i == 1:
            source_ids, src_mask = kw_ids, kw_mask
            source_states = kw_states
        else:
            source_ids, src_mask = lines[:, i - 2, :], None
            lo = (i - 2) * b
            source_states = ad.slice_(src_states, slice(lo, lo + b))
        targets = lines[:, i - 1, :]
        record = TaskRecord(index=i, source_ids=source_ids, target_ids=targets,
                            clue_before=clue)
        session, task_logp, hits = decode_task(source_states, src_mask,
                                               targets, clue)
        greedy_hits += hits
        log_prob = task_logp if log_prob is None else log_prob + task_logp
        if i >= 2:
            trace = session.trace()
            if cfg.saliency == "tfidf":
                w_in = _line_weights(source_ids, tfidf)
                w_out = _line_weights(targets, tfidf)
                scores = saliency_tfidf(trace, w_in, w_out)
            else:
                scores = saliency_naive(trace)
            selections = select_salient_batch(scores, k)
            clue = model.update_clue(clue, selections, scores, source_states)
            record.trace = trace
            record.scores = scores.data.copy()
            record.selections = selections
        tasks.append(record)

    return TrainingExampleChain(form=form, tasks=tasks, log_probs=log_prob,
                                clue_final=clue, greedy_hits=greedy_hits,
                                total_chars=b * n_tasks * t)


def build_chain(poem: Poem, model: Model, tfidf: TfIdfTable) -> TrainingExampleChain:
    """The single-poem chain, with clue states and selections materialized."""
    keyword = poem.keyword or extract_keyword(poem, tfidf)
    style_ids = None
    if "style" in model.cfg.ext_kinds:
        style_ids = np.array([STYLE_TO_ID[poem.style or "none"]])
    lines = np.array(poem.lines)[None, :, :]
    return run_chain(model, tfidf, poem.form, lines, [keyword], style_ids)


def chain_loss(chain: TrainingExampleChain) -> Tensor:
    """Mean per-character cross entropy (nats) over the batch."""
    return ad.mul(ad.sum_(chain.log_probs), -1.0 / chain.total_chars)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    tfidf: TfIdfTable
    history: list[dict] = field(default_factory=list)
    adam: AdamState | None = None


def _prepared(poems: list[Poem], tfidf: TfIdfTable) -> list[Poem]:
    out = []
    for poem in poems:
        if poem.keyword is None:
            poem = replace(poem, keyword=extract_keyword(poem, tfidf))
        out.append(poem)
    return out


def _form_groups(poems: list[Poem]):
    groups: dict[str, list[Poem]] = {}
    for poem in poems:
        groups.setdefault(poem.form, []).append(poem)
    return groups


def _batch_arrays(poems: list[Poem], need_style: bool):
    lines = np.array([p.lines for p in poems])
    keywords = [p.keyword for p in poems]
    style_ids = None
    if need_style:
        style_ids = np.array([STYLE_TO_ID[p.style or "none"] for p in poems])
    return lines, keywords, style_ids


def batch_loss(model: Model, tfidf: TfIdfTable, poems: list[Poem]) -> Tensor:
    """Loss of one (possibly mixed-form) batch: per-form sub-batches are
    weighted by poem count so the result equals the mean of per-poem losses."""
    need_style = "style" in model.cfg.ext_kinds
    total = None
    for form, group in _form_groups(poems).items():
        lines, keywords, style_ids = _batch_arrays(group, need_style)
        chain = run_chain(model, tfidf, form, lines, keywords, style_ids)
        part = ad.mul(chain_loss(chain), len(group) / len(poems))
        total = part if total is None else total + part
    return total


def evaluate(model: Model, tfidf: TfIdfTable, poems: list[Poem],
             batch_size: int = 64) -> float:
    """Per-character cross entropy without recording gradients."""
    if not poems:
        return float("nan")
    total = 0.0
    for start in range(0, len(poems), batch_size):
        chunk = poems[start:start + batch_size]
        total += batch_loss(model, tfidf, chunk).item() * len(chunk)
    return total / len(poems)


def train(corpus: Corpus, config: TrainConfig, model: Model | None = None,
          tfidf: TfIdfTable | None = None) -> TrainResult:
    """Fit the model; returns it with the loss history (step, train, val)."""
    if not corpus.poems:
        raise TrainingError("empty training split")
    if tfidf is None:
        tfidf = TfIdfTable.from_poems(corpus.poems, tf_scope=config.tf_scope)
    poems = _prepared(corpus.poems, tfidf)
    val_poems = _prepared(corpus.val_poems, tfidf) if corpus.val_poems else []
    if model is None:
        model = Model.init(config.model_config(len(corpus.vocab)), seed=config.seed)
    params = model.params.as_list()
    adam = AdamState.for_params(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    step = 0
    done = False
    for _ in range(config.epochs):
        if done:
            break
        order = rng.permutation(len(poems))
        for start in range(0, len(poems), config.batch_size):
            batch = [poems[i] for i in order[start:start + config.batch_size]]
            if not batch:
                raise TrainingError("zero-length batch")
            with Tape() as tape:
                loss = batch_loss(model, tfidf, batch)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at step {step}")
                grads = tape.gradients(loss, params)
            adam_step(params, grads, adam)
            row = {"step": step, "train_loss": value, "val_loss": None}
            if val_poems and step % config.validation_interval == 0:
                row["val_loss"] = evaluate(model, tfidf, val_poems,
                                           config.batch_size)
            history.append(row)
            step += 1
            if config.max_steps and step >= config.max_steps:
                done = True
                break
    return TrainResult(model=model, tfidf=tfidf, history=history, adam=adam)


def write_loss_curve(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train-loss", "val-loss"])
        for row in history:
            val = "" if row["val_loss"] is None else f"{row['val_loss']:.6f}"
            writer.writerow([row["step"], f"{row['train_loss']:.6f}", val])


# ---------------------------------------------------------------------------
# style fine-tuning


def balanced_style_subset(poems: list[Poem], seed: int = 0) -> list[Poem]:
    """Equal-sized samples of every labeled class present in the corpus
    (unannotated poems are excluded, labels are downsampled to the
    smallest class)."""
    by_label: dict[str, list[Poem]] = {}
    for poem in poems:
        if poem.style is not None:
            by_label.setdefault(poem.style, []).append(poem)
    if not by_label:
        raise TrainingError("style fine-tuning needs style-labeled poems")
    quota = min(len(group) for group in by_label.values())
    rng = np.random.default_rng(seed)
    subset: list[Poem] = []
    for label in sorted(by_label):
        group = by_label[label]
        picked = rng.permutation(len(group))[:quota]
        subset.extend(group[i] for i in sorted(picked))
    return subset


def finetune_style(model: Model, corpus: Corpus, config: TrainConfig,
                   tfidf: TfIdfTable | None = None) -> TrainResult:
    """Continue training with the style extension enabled on an equal-mix
    style-labeled subset of the corpus. The pretrained tf-idf table keeps
    supplying the saliency weights (the fine-tune subset is too small to
    re-estimate idf from)."""
    kinds = model.cfg.ext_kinds
    if "style" not in kinds:
        kinds = "style" if kinds == "none" else "intent+style"
    cfg = replace(model.cfg, ext_kinds=kinds)
    model = Model(cfg, model.params)
    subset = balanced_style_subset(corpus.poems, seed=config.seed)
    labeled = Corpus(poems=subset, vocab=corpus.vocab,
                     val_poems=corpus.val_poems)
    config = replace(config, ext_kinds=kinds, clue_mode=cfg.clue_mode,
                     saliency=cfg.saliency)
    return train(labeled, config, model=model, tfidf=tfidf)
