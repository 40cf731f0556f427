"""Command-line pipeline: ingest, tokenize, train, generate, evaluate, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import torch

from .errors import DataError, MSTNError, TrainingDiverged
from .evaluate import evaluate_protocol, write_distribution_csvs
from .model import ModelConfig
from .sampler import MODES, GenerationRequest, generate, tonic_prior, write_samples
from .score_io import (
    TICKS_PER_BAR, Score, check_score, parse_abc, parse_musicxml, split_abc_tunes,
    split_train_valid, write_manifest,
)
from .tokenizer import (
    PREFIX_LEN, Vocab, augment_corpus, build_vocab, encode, read_token_file, write_token_file,
)
from .trainer import TrainConfig, load_model, train

log = logging.getLogger("mstn")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2))


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def write_corpus(path, scores, seed: int) -> None:
    with open(path, "w") as fh:
        for s in scores:
            fh.write(json.dumps({**s.to_dict(), "seed": seed}) + "\n")


def read_corpus(path) -> list[Score]:
    with open(path) as fh:
        return [Score.from_dict(json.loads(line)) for line in fh if line.strip()]


def _collect(paths, suffixes) -> list[Path]:
    out = []
    for p in paths:
        p = _require(p, "input")
        if p.is_dir():
            out += sorted(f for f in p.rglob("*") if f.suffix.lower() in suffixes)
        else:
            out.append(p)
    return out


# ----------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts: Counter = Counter()
    entries, scores = [], []
    seen: set[str] = set()

    def keep(score: Score | None, source: str, error: str | None = None):
        if score is not None:
            error = check_score(score)
        entry = {"source": source, "id": score.id if score else None, "status": "kept" if not error else "dropped"}
        if score is not None:
            entry.update(n_bars=score.n_bars, tonic=score.tonic, mode=score.mode)
        if error:
            entry["reason"] = error
            counts[error] += 1
        else:
            if score.id in seen:
                raise DataError(f"duplicate piece id {score.id!r} from {source}")
            seen.add(score.id)
            counts["kept"] += 1
            scores.append(score)
        entries.append(entry)

    for f in _collect(args.abc or [], {".abc"}):
        for i, tune in enumerate(split_abc_tunes(f.read_text(errors="replace"))):
            source = f"{f}#{i + 1}"
            try:
                s = parse_abc(tune)
                s = Score(f"{f.stem}-{s.id}" if args.prefix_ids else s.id, s.tonic, s.mode, s.notes, s.n_bars,
                          s.time_signature)
            except DataError as exc:
                keep(None, source, type(exc).__name__)
                continue
            keep(s, source)
    for f in _collect(args.musicxml or [], {".xml", ".musicxml"}):
        try:
            keep(parse_musicxml(f.read_text(), f.stem), str(f))
        except DataError as exc:
            keep(None, str(f), type(exc).__name__)
    if not scores:
        raise DataError("no piece survived ingestion")
    train_set, valid_set = split_train_valid(scores, 1 - args.valid_ratio, args.seed) if args.valid_ratio else (scores, [])
    write_corpus(out / "corpus.jsonl", train_set, args.seed)
    write_corpus(out / "valid.jsonl", valid_set, args.seed)
    write_manifest(out / "manifest.json", entries, counts, args.seed)
    print(json.dumps({"kept": counts["kept"], "dropped": sum(v for k, v in counts.items() if k != "kept"),
                      "train": len(train_set), "valid": len(valid_set)}))
    return 0


def cmd_tokenize(args) -> int:
    src = _require(args.corpus, "corpus directory")
    out = Path(args.out or src)
    out.mkdir(parents=True, exist_ok=True)
    train_scores = read_corpus(_require(src / "corpus.jsonl", "corpus file"))
    valid_path = src / "valid.jsonl"
    valid_scores = read_corpus(valid_path) if valid_path.exists() else []
    if args.no_augment:
        augmented, tmap = train_scores, {s.id: s.id for s in train_scores}
    else:
        augmented, tmap = augment_corpus(train_scores)
    vocab = build_vocab(augmented + valid_scores)
    seqs = [encode(s, vocab, tmap[s.id]) for s in augmented]
    header = f"seed={args.seed}"
    (out / "vocab.json").write_text(vocab.to_json())
    write_token_file(out / "train.tokens", seqs, vocab, header)
    write_token_file(out / "valid.tokens", [encode(s, vocab) for s in valid_scores], vocab, header)
    _write_json(out / "template_map.json", {"seed": args.seed, "map": tmap})
    _write_json(out / "tokenize.json", {"seed": args.seed, "vocab_size": len(vocab), "train_sequences": len(seqs),
                                        "valid_sequences": len(valid_scores), "augmented": not args.no_augment,
                                        "corpus": str(src.resolve())})
    print(json.dumps({"vocab_size": len(vocab), "train_sequences": len(seqs)}))
    return 0


def _load_vocab(data: Path) -> Vocab:
    return Vocab.from_json(_require(data / "vocab.json", "vocabulary").read_text())


def cmd_train(args) -> int:
    data = _require(args.data, "data directory")
    vocab = _load_vocab(data)
    seqs = read_token_file(_require(data / "train.tokens", "token file"), vocab)
    valid_path = data / "valid.tokens"
    valid = read_token_file(valid_path, vocab) if valid_path.exists() else []
    mcfg = _read_json(_require(args.model_config, "model config")) if args.model_config else {}
    tcfg = _read_json(_require(args.train_config, "train config")) if args.train_config else {}
    for key in ("variant", "n_layers", "n_heads", "d_model", "lam", "max_len"):
        if getattr(args, key) is not None:
            mcfg[key] = getattr(args, key)
    for key, attr in (("base_lr", "lr"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("warmup_epochs", "warmup_epochs"), ("max_steps", "max_steps"), ("clip_norm", "clip_norm")):
        if getattr(args, attr) is not None:
            tcfg[key] = getattr(args, attr)
    mcfg["seed"] = tcfg["seed"] = args.seed
    mcfg.setdefault("max_len", max(len(s) for s in seqs))
    model_cfg = ModelConfig.from_dict(mcfg)
    train_cfg = TrainConfig.from_dict(tcfg)
    corpus_dir = _read_json(data / "tokenize.json").get("corpus") if (data / "tokenize.json").exists() else None
    extra = {"seed": args.seed, "tonic_prior": tonic_prior(seqs, vocab), "corpus": corpus_dir}
    result = train(seqs, vocab, model_cfg, train_cfg, valid, args.out, args.resume, extra)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"checkpoint": str(result.checkpoint), "steps": result.model.params.step,
                      "train_loss": last.get("train_loss"), "valid_loss": last.get("valid_loss")}))
    return 0


def _templates(meta: dict, corpus_arg) -> dict[str, Score]:
    src = corpus_arg or meta.get("corpus")
    if not src:
        raise UsageError("no corpus recorded in the checkpoint; pass --corpus")
    return {s.id: s for s in read_corpus(_require(Path(src) / "corpus.jsonl", "corpus file"))}


def cmd_generate(args) -> int:
    model, vocab, meta = load_model(_require(args.ckpt, "checkpoint"))
    n_bars, motif, key = args.n_bars, None, None
    if args.mode == "continuation" or n_bars is None:
        templates = _templates(meta, args.corpus)
        if args.template not in templates:
            raise UsageError(f"template {args.template!r} not in the corpus")
        template = templates[args.template]
        n_bars = n_bars or template.n_bars
        if args.mode == "continuation":
            if not 1 <= args.motif_bar <= template.n_bars:
                raise UsageError(f"--motif-bar must be in [1, {template.n_bars}]")
            seq = encode(template, vocab)
            start = PREFIX_LEN + (args.motif_bar - 1) * TICKS_PER_BAR
            motif, key = seq.tokens[start:start + TICKS_PER_BAR], seq.tokens[:PREFIX_LEN]
    req = GenerationRequest(args.mode, args.template, n_bars, motif, key, args.samples, args.temperature, args.seed)
    out = generate(model, vocab, req, meta.get("tonic_prior"))
    folder = write_samples(args.out, args.template, out, vocab,
                           {"mode": args.mode, "seed": args.seed, "temperature": args.temperature,
                            "n_bars": n_bars, "motif_bar": args.motif_bar if args.mode == "continuation" else None,
                            "checkpoint": str(args.ckpt)})
    print(json.dumps({"folder": str(folder), "samples": len(out), "repairs": out.repairs}))
    return 0


def cmd_evaluate(args) -> int:
    model, vocab, meta = load_model(_require(args.ckpt, "checkpoint"))
    corpus = list(_templates(meta, args.corpus).values())
    registered = set(model.templates) if model.uses_template else None
    templates = [s for s in corpus if registered is None or s.id in registered]
    if args.max_templates:
        templates = templates[:args.max_templates]
    if not templates:
        raise DataError("no evaluable templates")
    report = evaluate_protocol(model, vocab, templates, corpus, args.modes, args.samples, args.temperature,
                               args.seed, meta.get("tonic_prior"), args.samples_out)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    report.write_csv(path.with_suffix(".csv"))
    print(json.dumps({f"{r['mode']}": {k: v for k, v in r.items() if k not in ("variant", "mode")}
                      for r in report.table_rows()}))
    return 0


def cmd_report(args) -> int:
    doc = _read_json(_require(args.report, "report"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = write_distribution_csvs(doc, out)
    rows = []
    for mode, r in doc["modes"].items():
        rows.append({"variant": doc.get("variant"), "mode": mode, **r["kl"], **r["similarity"]})
    with open(out / "table.csv", "w") as fh:
        fh.write(",".join(rows[0]) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row.values()) + "\n")
    print(json.dumps({"files": [str(p) for p in paths] + [str(out / "table.csv")], "seed": doc.get("seed")}))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mstn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="parse ABC / MusicXML files into a filtered corpus")
    s.add_argument("--abc", action="append", help="ABC file or directory (repeatable)")
    s.add_argument("--musicxml", action="append", help="MusicXML file or directory (repeatable)")
    s.add_argument("--out", required=True)
    s.add_argument("--valid-ratio", type=float, default=0.0)
    s.add_argument("--prefix-ids", action="store_true", help="prefix ABC X: numbers with the file stem")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("tokenize", help="augment and encode a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out")
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model-config")
    s.add_argument("--train-config")
    s.add_argument("--variant", choices=("MT", "CMT", "MSTN-C", "MSTN-U"))
    s.add_argument("--n-layers", type=int)
    s.add_argument("--n-heads", type=int)
    s.add_argument("--d-model", type=int)
    s.add_argument("--lam", type=float)
    s.add_argument("--max-len", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--warmup-epochs", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--clip-norm", type=float)
    s.add_argument("--resume")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample melodies with a template's structure")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--template", required=True)
    s.add_argument("--mode", choices=MODES, default="free")
    s.add_argument("--motif-bar", type=int, default=1)
    s.add_argument("--samples", type=int, default=2)
    s.add_argument("--n-bars", type=int)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--corpus")
    s.add_argument("--out", default="samples")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="run the generation protocol and write a metrics report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--corpus")
    s.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    s.add_argument("--samples", type=int, default=2)
    s.add_argument("--max-templates", type=int)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--samples-out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="write plot-ready CSVs from a metrics report")
    s.add_argument("--report", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("MSTN_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"mstn: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"mstn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, MSTNError, ValueError, KeyError, OSError) as exc:
        print(f"mstn: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
