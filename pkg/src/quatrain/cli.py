"""Command-line entry point.

Commands: train, finetune-style, generate, eval-bleu, eval-saliency,
eval-innovation, inspect-saliency, check-form. Exit status 0 on success,
1 on validation failures (bad flags, missing paths), 2 on runtime errors.
All randomness is controlled by --seed; repeated runs with the same seed
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (CorpusError, FORM_LENGTH, Poem, STYLES, load_corpus,
                     load_tone_lexicon)
from .generator import (GenerationError, PatternTable, check_form,
                        generate_poem)
from .metrics import MetricError, corpus_bleu, innovation, saliency_jaccard
from .trainer import (TrainConfig, TrainingError, build_chain,
                      config_from_file, finetune_style, train,
                      write_loss_curve)


class CliError(Exception):
    """Validation failure: wrong flags, missing inputs (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; bad usage is a validation failure
        self.print_usage(sys.stderr)
        raise CliError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="quatrain",
                     description="Salient-clue quatrain generation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *names):
        if "corpus" in names:
            p.add_argument("--corpus", help="corpus text file")
        if "config" in names:
            p.add_argument("--config", help="flat key=value training config")
        if "checkpoint" in names:
            p.add_argument("--checkpoint", help="model checkpoint path")
        if "out" in names:
            p.add_argument("--out", help="output path")
        if "lexicon" in names:
            p.add_argument("--lexicon", help="tone lexicon TSV")
        if "seed" in names:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a model from scratch")
    common(p, "corpus", "config", "out", "seed")
    p.add_argument("--clue", choices=("sdu", "ssi"))
    p.add_argument("--ext", choices=("none", "intent", "style", "intent+style"))

    p = sub.add_parser("finetune-style", help="style fine-tuning of a checkpoint")
    common(p, "corpus", "config", "checkpoint", "out", "seed")

    p = sub.add_parser("generate", help="generate quatrains from keywords")
    common(p, "checkpoint", "out", "lexicon", "seed")
    p.add_argument("--keyword", action="append", required=False,
                   help="keyword (repeatable for several poems)")
    p.add_argument("--style", choices=STYLES)
    p.add_argument("--form", choices=tuple(FORM_LENGTH), default="wujue")
    p.add_argument("--clue", choices=("sdu", "ssi"))
    p.add_argument("--ext", choices=("none", "intent", "style", "intent+style"))
    p.add_argument("--beam", type=int, default=20)
    p.add_argument("--constraints", choices=("on", "off"), default="off")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("eval-bleu", help="corpus BLEU of generated poems")
    p.add_argument("hypotheses", help="generator JSON-lines (or corpus text)")
    common(p, "corpus", "out")

    p = sub.add_parser("eval-saliency",
                       help="overlap between model and annotated selections")
    p.add_argument("gold", help="JSON-lines: {\"poem\": ..., \"selections\": ...}")
    common(p, "checkpoint", "out")

    p = sub.add_parser("eval-innovation", help="pairwise poem similarity")
    p.add_argument("poems", help="generator JSON-lines (or corpus text)")
    common(p, "out")

    p = sub.add_parser("inspect-saliency",
                       help="saliency scores and selections per transition")
    common(p, "checkpoint", "corpus", "out")
    p.add_argument("--poem", help="literal poem, four lines joined by '|'")

    p = sub.add_parser("check-form", help="length/tone/rhyme report")
    common(p, "corpus", "lexicon", "out")
    p.add_argument("poems", nargs="?", help="generator JSON-lines")
    return parser


def _require(value, flag: str):
    if value is None:
        raise CliError(f"missing required flag {flag}")
    return value


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None


def _read_poem_texts(path) -> list[list[str]]:
    """Poems as lists of 4 line strings, from generator JSONL or corpus text."""
    poems = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            if raw.startswith("{"):
                record = json.loads(raw)
                poems.append(list(record["lines"]))
            else:
                poems.append(raw.split("\t")[0].split("|"))
    if not poems:
        raise CliError(f"no poems in {path}")
    return poems


def _dump(payload, out_path):
    text = json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return text


# ---------------------------------------------------------------------------
# commands


def _cmd_train(args) -> int:
    corpus_path = _require(args.corpus, "--corpus")
    out_path = _require(args.out, "--out")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.clue:
        overrides["clue_mode"] = args.clue
    if args.ext:
        overrides["ext_kinds"] = args.ext
    config = (config_from_file(args.config, **overrides) if args.config
              else TrainConfig(**overrides))
    corpus = load_corpus(corpus_path, val_count=config.val_count)
    result = train(corpus, config)
    save_checkpoint(out_path, result.model, corpus.vocab, result.tfidf,
                    extra_config=config.to_dict())
    write_loss_curve(out_path + ".losses.csv", result.history)
    final = result.history[-1]["train_loss"] if result.history else float("nan")
    print(f"trained {len(result.history)} steps, final loss "
          f"{final:.4f} nats/char -> {out_path}")
    return 0


def _cmd_finetune(args) -> int:
    corpus_path = _require(args.corpus, "--corpus")
    out_path = _require(args.out, "--out")
    model, vocab, tfidf, manifest = _load_model(_require(args.checkpoint,
                                                         "--checkpoint"))
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = (config_from_file(args.config, **overrides) if args.config
              else TrainConfig(**overrides))
    corpus = load_corpus(corpus_path, val_count=config.val_count, vocab=vocab)
    result = finetune_style(model, corpus, config, tfidf=tfidf)
    save_checkpoint(out_path, result.model, vocab, tfidf,
                    extra_config=config.to_dict())
    write_loss_curve(out_path + ".losses.csv", result.history)
    print(f"fine-tuned {len(result.history)} steps -> {out_path}")
    return 0


def _cmd_generate(args) -> int:
    model, vocab, tfidf, manifest = _load_model(_require(args.checkpoint,
                                                         "--checkpoint"))
    keywords = args.keyword or []
    if not keywords:
        raise CliError("missing required flag --keyword")
    if args.clue and args.clue != model.cfg.clue_mode:
        raise CliError(f"--clue {args.clue} does not match checkpoint "
                       f"({model.cfg.clue_mode})")
    if args.ext and args.ext != model.cfg.ext_kinds:
        raise CliError(f"--ext {args.ext} does not match checkpoint "
                       f"({model.cfg.ext_kinds})")
    if args.style and "style" not in model.cfg.ext_kinds:
        raise CliError("checkpoint has no style extension; train or "
                       "fine-tune with --ext style first")
    constraints = args.constraints == "on"
    lexicon = None
    if args.lexicon:
        lexicon = load_tone_lexicon(args.lexicon)
    elif constraints:
        raise CliError("--constraints on requires --lexicon")
    if args.beam < 1:
        raise CliError("--beam must be >= 1")
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1")

    def run(keyword: str):
        return generate_poem(model, vocab, tfidf, keyword, args.form,
                             style=args.style, beam_width=args.beam,
                             constraints=constraints, lexicon=lexicon,
                             seed=args.seed)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            poems = list(pool.map(run, keywords))
    else:
        poems = [run(k) for k in keywords]
    lines = [json.dumps(p.to_dict(), ensure_ascii=False, sort_keys=True)
             for p in poems]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_eval_bleu(args) -> int:
    refs_path = _require(args.corpus, "--corpus")
    hyps = ["".join(p) for p in _read_poem_texts(args.hypotheses)]
    refs = ["".join(p) for p in _read_poem_texts(refs_path)]
    if len(hyps) != len(refs):
        raise CliError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    report = corpus_bleu([list(h) for h in hyps], [list(r) for r in refs])
    _dump(report.to_dict(), args.out)
    print(f"BLEU = {report.bleu:.2f}  "
          f"(precisions {'/'.join(f'{p:.3f}' for p in report.precisions)}, "
          f"BP {report.brevity_penalty:.3f}, "
          f"lengths {report.hyp_length}/{report.ref_length})")
    return 0


def _poem_saliency_tables(model, vocab, tfidf, poem: Poem):
    chain = build_chain(poem, model, tfidf)
    tables = []
    for task in chain.tasks:
        if task.selections is None:
            continue
        source = [vocab.char(i) for i in task.source_ids[0]]
        tables.append({
            "line": task.index,
            "source_line": task.index - 1,
            "source_chars": source,
            "scores": [float(x) for x in task.scores[0]],
            "indices": list(task.selections[0]),
            "selected_chars": [source[j] for j in task.selections[0]],
        })
    return tables


def _parse_poem_arg(text: str, vocab) -> Poem:
    lines = text.split("|")
    if len(lines) != 4 or len(set(map(len, lines))) != 1:
        raise CliError("--poem needs four equal-length lines joined by '|'")
    length = len(lines[0])
    form = {5: "wujue", 7: "qijue"}.get(length)
    if form is None:
        raise CliError(f"line length {length} matches no form")
    return Poem(form=form, lines=[vocab.encode(line) for line in lines])


def _cmd_inspect(args) -> int:
    model, vocab, tfidf, manifest = _load_model(_require(args.checkpoint,
                                                         "--checkpoint"))
    poems = []
    if args.poem:
        poems.append(_parse_poem_arg(args.poem, vocab))
    if args.corpus:
        poems.extend(load_corpus(args.corpus, vocab=vocab).poems)
    if not poems:
        raise CliError("give --poem or --corpus")
    records = []
    for poem in poems:
        tables = _poem_saliency_tables(model, vocab, tfidf, poem)
        records.append({"poem": poem.text(vocab), "transitions": tables})
        print(poem.text(vocab))
        for tab in tables:
            pairs = " ".join(f"{c}:{s:.3f}" for c, s in
                             zip(tab["source_chars"], tab["scores"]))
            chosen = ",".join(tab["selected_chars"]) or "-"
            print(f"  line {tab['source_line']}->{tab['line']}  [{pairs}]  "
                  f"selected: {chosen}")
    if args.out:
        _dump(records, args.out)
    return 0


def _cmd_eval_saliency(args) -> int:
    model, vocab, tfidf, manifest = _load_model(_require(args.checkpoint,
                                                         "--checkpoint"))
    model_sel = []
    gold_sel = []
    with open(args.gold, encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            record = json.loads(raw)
            poem = _parse_poem_arg(record["poem"], vocab)
            tables = _poem_saliency_tables(model, vocab, tfidf, poem)
            for tab, gold in zip(tables, record["selections"]):
                model_sel.append(set(tab["indices"]))
                gold_sel.append(set(int(i) for i in gold))
    score = saliency_jaccard(model_sel, gold_sel)
    _dump({"saliency_jaccard": score, "lines": len(model_sel)}, args.out)
    print(f"saliency Jaccard = {score:.4f} over {len(model_sel)} lines")
    return 0


def _cmd_eval_innovation(args) -> int:
    poems = ["".join(p) for p in _read_poem_texts(args.poems)]
    score = innovation(poems)
    _dump({"innovation": score, "poems": len(poems)}, args.out)
    print(f"innovation (mean pairwise Jaccard) = {score:.4f} "
          f"over {len(poems)} poems")
    return 0


def _cmd_check_form(args) -> int:
    lexicon = load_tone_lexicon(_require(args.lexicon, "--lexicon"))
    source = args.poems or args.corpus
    if not source:
        raise CliError("give a poems file or --corpus")
    poems = _read_poem_texts(source)
    patterns = PatternTable()
    ok = 0
    reports = []
    for i, lines in enumerate(poems):
        form = {5: "wujue", 7: "qijue"}.get(len(lines[0]), "wujue")
        report = check_form(lines, form, lexicon, patterns)
        reports.append({"poem": "|".join(lines), **report.to_dict()})
        status = "ok" if report.all_ok else "FAIL"
        print(f"{i}: {status} length={report.length_ok} tone={report.tone_ok} "
              f"rhyme={report.rhyme_ok} template={report.template_index}")
        ok += report.all_ok
    print(f"{ok}/{len(poems)} poems pass")
    if args.out:
        _dump(reports, args.out)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "finetune-style": _cmd_finetune,
    "generate": _cmd_generate,
    "eval-bleu": _cmd_eval_bleu,
    "eval-saliency": _cmd_eval_saliency,
    "eval-innovation": _cmd_eval_innovation,
    "inspect-saliency": _cmd_inspect,
    "check-form": _cmd_check_form,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (CorpusError, CheckpointError, MetricError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TrainingError, GenerationError, ad.ShapeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
