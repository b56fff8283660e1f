"""``caption`` command line: preprocess, train, decode, evaluate, ablate, sweep, gradcheck.

Every subcommand that takes ``--out`` writes ``manifest.json`` there before
doing any work. Results are printed to standard output as JSON lines and,
with ``--out``, also written next to the figures that render them.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import DataError, Vocabulary, build_vocabulary, load_dataset, load_features, read_manifest, tokenize
from .knowledge import KnowledgeFormatError, load_triples
from .metrics import MetricError, evaluate
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .train import (
    PRESETS,
    ConfigError,
    TrainConfig,
    TrainingError,
    build_corpora,
    check_xe_gradients,
    decode_records,
    init_params,
    read_config_file,
    score_records,
    train_pipeline,
    train_scst,
    train_xe,
)

log = logging.getLogger("kgcap")

ABLATIONS = (
    ("RL", {"word_attention": False, "knowledge": False}),
    ("RL+WA", {"word_attention": True, "knowledge": False}),
    ("RL+KG", {"word_attention": False, "knowledge": True}),
    ("RL+WA+KG", {"word_attention": True, "knowledge": True}),
)
SWEEP_LAMBDAS = tuple(round(0.1 * k, 1) for k in range(10))
GRADCHECK_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


# -- manifests and files -------------------------------------------------------


def git_blob_sha1(path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(out: Path, command: str, config: TrainConfig | None, inputs: dict, argv) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": config.seed if config else None,
        "config": config.to_dict() if config else None,
        "inputs": {
            name: {"path": str(p), "sha1": git_blob_sha1(p)} for name, p in sorted(inputs.items()) if p is not None
        },
        "started_at": _now(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def finish_manifest(out: Path, manifest: dict, artifacts) -> None:
    manifest["finished_at"] = _now()
    manifest["artifacts"] = sorted(str(Path(a).relative_to(out)) for a in artifacts)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_jsonl(path: Path, rows) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def emit(rows) -> None:
    for row in rows:
        print(json.dumps(row, sort_keys=True))


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what}: no such file {path}")
    return path


# -- configuration -------------------------------------------------------------


def resolve_config(args) -> TrainConfig:
    """Preset, then config file, then ``--set`` pairs, then dedicated flags."""
    config = PRESETS[args.preset]
    if args.config:
        config = TrainConfig.from_mapping(read_config_file(_require(args.config, "--config")), config)
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    config = TrainConfig.from_mapping(pairs, config)
    flags = {"seed": args.seed, "lam": args.lam, "beam": args.beam, "max_len": args.max_len}
    return config.replace(**{k: v for k, v in flags.items() if v is not None})


def _vocab_for(args, config: TrainConfig, data: Path) -> Vocabulary:
    if args.vocab:
        return Vocabulary.load(_require(args.vocab, "--vocab"))
    captions = [tokenize(c) for row in read_manifest(data) for c in row["captions"]]
    if not captions:
        raise DataError(f"{data}: no captions to build a vocabulary from")
    return build_vocabulary(captions, config.max_vocab)


def _index_for(args):
    return load_triples(_require(args.triples, "--triples")) if args.triples else None


def _inputs(args, *names) -> dict:
    return {n: getattr(args, n, None) for n in names}


# -- subcommands ---------------------------------------------------------------


def cmd_preprocess(args, argv) -> int:
    data = _require(args.data, "--data")
    config = resolve_config(args)
    out = Path(args.out)
    manifest = write_run_manifest(out, "preprocess", config, _inputs(args, "data"), argv)
    vocab = _vocab_for(args, config, data)
    vocab.save(out / "vocab.txt")
    index = {}
    for row in read_manifest(data):
        features = load_features(row["features"])
        index[row["id"]] = {"features": row["features"], "L": features.L, "D": features.D, "sha1": git_blob_sha1(row["features"])}
    (out / "features.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary = {"vocab_size": len(vocab), "n_docs": vocab.n_docs, "n_images": len(index)}
    emit([summary])
    finish_manifest(out, manifest, [out / "vocab.txt", out / "features.json"])
    return 0


def _training_setup(args, argv, command: str):
    data = _require(args.data, "--data")
    config = resolve_config(args)
    out = Path(args.out)
    manifest = write_run_manifest(out, command, config, _inputs(args, "data", "triples", "vocab", "val", "init"), argv)
    vocab = _vocab_for(args, config, data)
    records = load_dataset(data, vocab)
    if not records:
        raise DataError(f"{data}: empty dataset")
    val = load_dataset(_require(args.val, "--val"), vocab) if args.val else None
    index = _index_for(args)
    corpora = build_corpora(records + (val or []), index, config)
    return config, out, manifest, vocab, records, val, corpora


def _write_training_outputs(out: Path, vocab, params, entries, title: str) -> list[Path]:
    from .plotting import plot_training_log

    vocab.save(out / "vocab.txt")
    save_checkpoint(params, out / "model.ckpt")
    write_jsonl(out / "train_log.jsonl", entries)
    paths = [out / "vocab.txt", out / "model.ckpt", out / "train_log.jsonl"]
    if entries:
        paths.append(plot_training_log(entries, out / "training_curve.png", title))
    return paths


def cmd_train_xe(args, argv) -> int:
    config, out, manifest, vocab, records, val, corpora = _training_setup(args, argv, "train-xe")
    params = init_params(config, len(vocab), records[0].features.D)
    result = train_xe(records, config, params, vocab, corpora, val, on_epoch=lambda e: emit([e]))
    artifacts = _write_training_outputs(out, vocab, result.params, result.log, "cross-entropy")
    finish_manifest(out, manifest, artifacts)
    return 0


def cmd_train_scst(args, argv) -> int:
    _require(args.init, "--init")
    if not args.vocab:
        raise UsageError("--vocab is required with --init (the checkpoint's vocabulary)")
    config, out, manifest, vocab, records, _val, corpora = _training_setup(args, argv, "train-scst")
    params = load_checkpoint(args.init)
    if params.config.vocab_size != len(vocab):
        raise CheckpointError(f"checkpoint vocabulary size {params.config.vocab_size} != {len(vocab)}")
    result = train_scst(records, config, params, vocab, corpora, on_epoch=lambda e: emit([e]))
    artifacts = _write_training_outputs(out, vocab, result.params, result.log, "self-critical")
    finish_manifest(out, manifest, artifacts)
    return 0


def cmd_caption(args, argv) -> int:
    data = _require(args.data, "--data")
    ckpt = _require(args.checkpoint, "--checkpoint")
    vocab = Vocabulary.load(_require(args.vocab, "--vocab"))
    config = resolve_config(args)
    out = Path(args.out) if args.out else None
    manifest = write_run_manifest(out, "caption", config, _inputs(args, "data", "checkpoint", "vocab", "triples"), argv) if out else None
    params = load_checkpoint(ckpt)
    if params.config.vocab_size != len(vocab):
        raise CheckpointError(f"checkpoint vocabulary size {params.config.vocab_size} != {len(vocab)}")
    records = load_dataset(data, vocab, require_captions=False)
    corpora = build_corpora(records, _index_for(args), config)
    decoded = decode_records(records, params, vocab, corpora, config)
    rows = []
    for rec in records:
        seq = decoded[rec.id]
        row = {"image_id": rec.id, "caption": " ".join(vocab.decode(seq.tokens)), "score": seq.score}
        if args.dump_attention:
            row["alphas"] = [a.tolist() for a in seq.alphas]
        rows.append(row)
    emit(rows)
    if out:
        artifacts = [write_jsonl(out / "captions.jsonl", rows)]
        if args.dump_attention:
            from .plotting import plot_attention

            (out / "attention").mkdir(exist_ok=True)
            for rec in records:
                seq = decoded[rec.id]
                words = vocab.decode(seq.tokens, strip=False)
                artifacts.append(plot_attention(seq.alphas, words, out / "attention" / f"{rec.id}.png"))
        finish_manifest(out, manifest, artifacts)
    return 0


def _caption_tokens(text: str) -> list[str]:
    try:
        return tokenize(text)
    except DataError:
        return []


def read_caption_file(path: Path, many: bool) -> dict:
    """``image_id``/``id`` rows with ``caption`` or ``captions``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key = str(row["image_id"] if "image_id" in row else row["id"])
                texts = row["captions"] if "captions" in row else [row["caption"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed caption row ({exc})") from None
            if isinstance(texts, str):
                texts = [texts]
            if not texts:
                raise DataError(f"{path}:{lineno}: no caption for {key}")
            tokens = [_caption_tokens(t) for t in texts]
            out[key] = tokens if many else tokens[0]
    if not out:
        raise DataError(f"{path}: no caption rows")
    return out


def cmd_evaluate(args, argv) -> int:
    hyp_path = _require(args.hyp, "--hyp")
    ref_path = _require(args.refs, "--refs")
    out = Path(args.out) if args.out else None
    manifest = write_run_manifest(out, "evaluate", None, _inputs(args, "hyp", "refs"), argv) if out else None
    hyps = read_caption_file(hyp_path, many=False)
    refs = read_caption_file(ref_path, many=True)
    refs = {k: [r for r in v if r] for k, v in refs.items()}
    empty = sorted(k for k, v in refs.items() if not v)
    if empty:
        raise DataError(f"{ref_path}: images without usable references {empty[:5]}")
    scores = evaluate(hyps, refs)
    emit([scores])
    if out:
        path = out / "metrics.json"
        path.write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        finish_manifest(out, manifest, [path])
    return 0


def _experiment_setup(args, argv, command: str):
    data = _require(args.data, "--data")
    config = resolve_config(args)
    out = Path(args.out)
    manifest = write_run_manifest(out, command, config, _inputs(args, "data", "triples", "vocab", "checkpoint"), argv)
    vocab = _vocab_for(args, config, data)
    records = load_dataset(data, vocab)
    if not records:
        raise DataError(f"{data}: empty dataset")
    return config, out, manifest, vocab, records, _index_for(args)


def cmd_ablate(args, argv) -> int:
    from .plotting import plot_ablation

    config, out, manifest, vocab, records, index = _experiment_setup(args, argv, "ablate")
    if index is None:
        raise UsageError("ablate needs --triples for the knowledge rows")
    rows, artifacts = [], []
    for name, flags in ABLATIONS:
        cfg = config.replace(**flags)
        params, entries = train_pipeline(records, cfg, vocab, index)
        corpora = build_corpora(records, index, cfg)
        row = {"config": name, **flags, **score_records(records, params, vocab, corpora, cfg)}
        rows.append(row)
        emit([row])
        slug = name.lower().replace("+", "_")
        artifacts.append(write_jsonl(out / f"log_{slug}.jsonl", entries))
    table = out / "ablation.json"
    table.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts += [table, plot_ablation(rows, out / "ablation.png")]
    finish_manifest(out, manifest, artifacts)
    return 0


def cmd_sweep_lambda(args, argv) -> int:
    from .plotting import plot_lambda_sweep

    config, out, manifest, vocab, records, index = _experiment_setup(args, argv, "sweep-lambda")
    if index is None:
        raise UsageError("sweep-lambda needs --triples")
    artifacts = []
    params = None
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        if params.config.vocab_size != len(vocab):
            raise CheckpointError(f"checkpoint vocabulary size {params.config.vocab_size} != {len(vocab)}")
    elif not args.retrain:
        params, entries = train_pipeline(records, config, vocab, index)
        artifacts.append(write_jsonl(out / "train_log.jsonl", entries))
    points = []
    for lam in SWEEP_LAMBDAS:
        cfg = config.replace(lam=lam, knowledge=True)
        model = params
        if model is None:
            model, _ = train_pipeline(records, cfg, vocab, index)
        corpora = build_corpora(records, index, cfg)
        point = {"lambda": lam, **score_records(records, model, vocab, corpora, cfg)}
        points.append(point)
        emit([point])
    curve = out / "lambda_sweep.json"
    curve.write_text(json.dumps(points, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts += [curve, plot_lambda_sweep(points, out / "lambda_sweep.png")]
    finish_manifest(out, manifest, artifacts)
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .synthetic import tiny_problem

    config = resolve_config(args)
    out = Path(args.out) if args.out else None
    manifest = write_run_manifest(out, "gradcheck", config, {}, argv) if out else None
    rows = []
    for tied in (True, False):
        params, vocab, record, caption, corpus = tiny_problem(config.seed, tied=tied)
        for name, rep in check_xe_gradients(params, record, caption, vocab, corpus, config.lam).items():
            ok = rep.ok and rep.max_rel_error < GRADCHECK_TOLERANCE
            rows.append({"param": name, "tied_output": tied, "max_rel_error": rep.max_rel_error, "pass": bool(ok)})
    emit(rows)
    passed = all(r["pass"] for r in rows)
    if out:
        finish_manifest(out, manifest, [write_jsonl(out / "gradcheck.jsonl", rows)])
    if not passed:
        print("gradcheck: finite-difference mismatch above tolerance", file=sys.stderr)
    return 0 if passed else 1


# -- parser --------------------------------------------------------------------


def _shared_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared options")
    g.add_argument("--config", metavar="PATH", help="flat key=value config file layered over the preset")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="built-in configuration (default: desk)")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    g.add_argument("--seed", type=int, help="seed for every random stream")
    g.add_argument("--lambda", dest="lam", type=float, help="knowledge weight on the output logits")
    g.add_argument("--beam", type=int, help="beam width; 1 decodes greedily")
    g.add_argument("--max-len", dest="max_len", type=int, help="maximum generated tokens")
    g.add_argument("--dump-attention", action="store_true", help="include per-step region attention in caption output")
    g.add_argument("--out", metavar="DIR", help="output directory for manifest, artifacts and figures")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_flags()
    parser = argparse.ArgumentParser(
        prog="caption",
        description="Knowledge-augmented attention captioning: training, decoding and evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_text, *, out_required=False):
        p = sub.add_parser(name, parents=[shared], help=help_text, description=help_text)
        p.set_defaults(func=func, out_required=out_required)
        return p

    p = add("preprocess", cmd_preprocess, "build the vocabulary and feature index", out_required=True)
    p.add_argument("--data", metavar="JSONL", help="dataset manifest")
    p.add_argument("--vocab", metavar="PATH", help="reuse this vocabulary instead of building one")

    for name, func, text in (
        ("train-xe", cmd_train_xe, "cross-entropy training from scratch"),
        ("train-scst", cmd_train_scst, "self-critical fine-tuning of a checkpoint"),
    ):
        p = add(name, func, text, out_required=True)
        p.add_argument("--data", metavar="JSONL", help="training manifest")
        p.add_argument("--val", metavar="JSONL", help="validation manifest for early stopping")
        p.add_argument("--triples", metavar="JSONL", help="knowledge triples")
        p.add_argument("--vocab", metavar="PATH", help="vocabulary file (built from --data when absent)")
        p.add_argument("--init", metavar="CKPT", help="warm-start checkpoint" if name == "train-scst" else argparse.SUPPRESS)

    p = add("caption", cmd_caption, "caption every image in a manifest")
    p.add_argument("--data", metavar="JSONL", help="manifest of images to caption")
    p.add_argument("--checkpoint", metavar="CKPT", help="trained model")
    p.add_argument("--vocab", metavar="PATH", help="vocabulary the model was trained with")
    p.add_argument("--triples", metavar="JSONL", help="knowledge triples")

    p = add("evaluate", cmd_evaluate, "score hypotheses against references")
    p.add_argument("--hyp", metavar="JSONL", help="rows with image_id and caption")
    p.add_argument("--refs", metavar="JSONL", help="rows with image_id (or id) and captions")

    p = add("ablate", cmd_ablate, "train and score the RL, RL+WA, RL+KG and RL+WA+KG configurations", out_required=True)
    p.add_argument("--data", metavar="JSONL", help="training manifest")
    p.add_argument("--triples", metavar="JSONL", help="knowledge triples")
    p.add_argument("--vocab", metavar="PATH", help="vocabulary file")

    p = add("sweep-lambda", cmd_sweep_lambda, "score lambda = 0.0, 0.1, ..., 0.9", out_required=True)
    p.add_argument("--data", metavar="JSONL", help="training manifest")
    p.add_argument("--triples", metavar="JSONL", help="knowledge triples")
    p.add_argument("--vocab", metavar="PATH", help="vocabulary file")
    p.add_argument("--checkpoint", metavar="CKPT", help="score this model instead of training one")
    p.add_argument("--retrain", action="store_true", help="train a separate model for every lambda")

    add("gradcheck", cmd_gradcheck, "finite-difference check of every parameter gradient on a tiny model")
    return parser


EXPECTED_ERRORS = (
    UsageError,
    DataError,
    ConfigError,
    KnowledgeFormatError,
    CheckpointError,
    MetricError,
    TrainingError,
    OSError,
)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.out_required and not args.out:
        parser.error(f"{args.command} requires --out DIR")
    try:
        return args.func(args, argv)
    except EXPECTED_ERRORS as exc:
        print(f"caption {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"caption {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
