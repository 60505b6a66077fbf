"""Command-line interface: ``gen-data``, ``train``, ``eval``, ``score``, ``attend``.

Exit codes: 0 success, 2 usage/config error, 3 data format or I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import attention, config
from .attention import Direction
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .dataio import (SyntheticSpec, Vocabulary, default_split_counts, generate_synthetic,
                     load_dataset, read_features, save_dataset, split)
from .encoders import ModelParams, encode_batch, project_regions
from .errors import ConfigError, ScanError
from .evaluation import ensemble_grids, evaluate_folds, evaluate_grid, format_table, score_grid
from .learning import train

log = logging.getLogger("scanmatch")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# flags that map one-to-one onto RunConfig fields
OVERRIDES = {
    "direction": str, "pooling": str, "lambda1": float, "lambda2": float, "max_regions": int,
    "method": str, "margin": float, "loss_mode": str, "batch_size": int, "lr": float,
    "lr_decay_epoch": int, "epochs": int, "clip_norm": float, "hidden": int, "embed_dim": int,
}


def _shared(p):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--preset", help=f"named preset (default {config.DEFAULT_PRESET})")
    p.add_argument("--seed", type=int, help="random seed (u64)")
    p.add_argument("--threads", type=int, help="worker threads for score grids (default 1)")


def _overrides(p, names):
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=OVERRIDES[name])


def build_parser():
    ap = argparse.ArgumentParser(prog="scanmatch", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic aligned dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--concepts", type=int, default=30)
    g.add_argument("--images", type=int, default=150)
    g.add_argument("--regions", type=int, default=6)
    g.add_argument("--captions", type=int, default=5, help="captions per image")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--raw-dim", type=int, default=64)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--split", help="train,val,test image counts (default M-2*(M//6), M//6, M//6)")

    t = sub.add_parser("train", help="train a model and write the best checkpoint")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    t.add_argument("--unidirectional", action="store_true", help="forward-only GRU")
    _shared(t)
    _overrides(t, OVERRIDES)

    e = sub.add_parser("eval", help="Recall@K in both retrieval directions")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", help="single checkpoint to evaluate")
    e.add_argument("--ensemble", nargs="+", metavar="CKPT", help="average score grids of several checkpoints")
    e.add_argument("--split", default="test")
    e.add_argument("--fold-size", type=int, help="average recalls over folds of this many images")
    e.add_argument("--json", dest="json_out", help="write the machine-readable report here")
    _shared(e)
    _overrides(e, ("direction", "pooling", "lambda1", "lambda2", "max_regions"))

    for name, helptext in (("score", "score one image against one caption"),
                           ("attend", "export the attention trace of one pair")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--features", required=True, help="SCNF feature file")
        s.add_argument("--index", type=int, default=0, help="image index within the feature file")
        s.add_argument("--caption", required=True, help="whitespace-tokenised caption text")
        if name == "score":
            s.add_argument("--trace", action="store_true", help="also print the attention trace")
            s.add_argument("--json", action="store_true", help="machine-readable full-precision output")
        else:
            s.add_argument("--out", required=True, help="trace document path (JSON)")
        _shared(s)
        _overrides(s, ("direction", "pooling", "lambda1", "lambda2", "max_regions"))
    return ap


# -- helpers ----------------------------------------------------------------

def _override_values(args):
    vals = {k: getattr(args, k) for k in OVERRIDES if hasattr(args, k)}
    vals["seed"] = getattr(args, "seed", None)
    vals["threads"] = getattr(args, "threads", None)
    if getattr(args, "unidirectional", False):
        vals["bidirectional"] = False
    return vals


def _checkpoint_run(meta, args):
    """RunConfig stored in a checkpoint, with any scoring flags from ``args`` applied."""
    stored = meta.get("run", {})
    cfg = config.RunConfig(**stored) if stored else config.RunConfig()
    over = {k: v for k, v in _override_values(args).items() if v is not None}
    return config._apply(cfg, over, "flags").validate()


def _load_model(path, args):
    params, meta = load_checkpoint(path)
    return params, meta, _checkpoint_run(meta, args)


def _json_dump(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args):
    spec = SyntheticSpec(concepts=args.concepts, images=args.images, regions=args.regions,
                         captions_per_image=args.captions, noise=args.noise, seed=args.seed,
                         raw_dim=args.raw_dim)
    spec.validate()
    if args.split:
        try:
            counts = tuple(int(x) for x in args.split.split(","))
        except ValueError:
            raise ConfigError(f"--split must look like 100,25,25, got {args.split!r}") from None
    else:
        counts = default_split_counts(spec.images)
    ds = split(generate_synthetic(spec), counts, seed=spec.seed)
    save_dataset(args.out, ds)
    print(f"images      {len(ds.features)}")
    print(f"captions    {len(ds.captions)}")
    print(f"vocabulary  {len(ds.vocab)}")
    print(f"regions     {spec.regions} x {spec.raw_dim}")
    print("split       " + " / ".join(f"{k} {len(ds.splits[k])}" for k in ("train", "val", "test")))
    return 0


def cmd_train(args):
    run = config.resolve(args.preset, args.config, _override_values(args))
    ds = load_dataset(args.data)
    params = ModelParams.init(ds.raw_dim, len(ds.vocab), run.hidden, run.embed_dim, seed=run.seed)
    log_path = args.log or args.out + ".log.jsonl"
    lines = []

    def on_epoch(rec):
        lines.append(json.dumps(rec, sort_keys=True))
        atomic_write(log_path, ("\n".join(lines) + "\n").encode())

    if run.epochs == 0:
        atomic_write(log_path, b"")
    result = train(ds, params, run.train_config(), seed=run.seed, threads=run.threads, on_epoch=on_epoch)
    meta = {"run": run.to_dict(), "preset": args.preset or config.DEFAULT_PRESET,
            "vocab": ds.vocab.tokens, "best_epoch": result.best_epoch}
    save_checkpoint(args.out, result.params, meta)
    print(f"checkpoint  {args.out} (best epoch {result.best_epoch})")
    print(f"log         {log_path}")
    return 0


def cmd_eval(args):
    paths = args.ensemble or ([args.checkpoint] if args.checkpoint else [])
    if not paths:
        raise ConfigError("eval needs --checkpoint or --ensemble")
    ds = load_dataset(args.data)
    if args.split not in ds.splits:
        raise ConfigError(f"dataset has no split {args.split!r}")
    feats, sents, owner = ds.subset(args.split)
    grids, runs, dims = [], [], None
    for path in paths:
        params, meta, run = _load_model(path, args)
        if "vocab" in meta and meta["vocab"] != ds.vocab.tokens:
            raise ConfigError(f"{path}: checkpoint vocabulary differs from the dataset's")
        if params.raw_dim != ds.raw_dim:
            raise ConfigError(f"{path}: expects {params.raw_dim}-d region features, data has {ds.raw_dim}")
        if dims is not None and params.dims() != dims:
            raise ConfigError(f"{path}: dimensions {params.dims()} differ from {dims}")
        dims = params.dims()
        grids.append(score_grid(feats, sents, owner, params, run.scan(), run.bidirectional,
                                threads=run.threads))
        runs.append(run.to_dict())
    grid = ensemble_grids(grids)
    res = evaluate_folds(grid, args.fold_size) if args.fold_size else evaluate_grid(grid)
    name = "ensemble" if len(paths) > 1 else os.path.basename(paths[0])
    print(format_table([(name, res)]))
    for rep in (res["sentence"], res["image"]):
        for note in rep.notes:
            print(f"note: {rep.direction.value} retrieval {note}")
    doc = {"checkpoints": paths, "config": runs, "split": args.split, "fold_size": args.fold_size,
           "images": int(grid.scores.shape[0]), "sentences": int(grid.scores.shape[1]),
           "sentence_retrieval": res["sentence"].to_dict(), "image_retrieval": res["image"].to_dict(),
           "rsum": res["rsum"]}
    if args.json_out:
        atomic_write(args.json_out, _json_dump(doc).encode())
    return 0


def pair_trace(args):
    """Load everything ``score``/``attend`` need and run the library scorer."""
    params, meta, run = _load_model(args.checkpoint, args)
    feats = read_features(args.features)
    if not 0 <= args.index < len(feats):
        raise ConfigError(f"--index {args.index} outside the {len(feats)} images in {args.features}")
    vocab = Vocabulary(meta["vocab"]) if "vocab" in meta else None
    words = args.caption.split()
    if not words:
        raise ConfigError("empty caption")
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary")
    ids, unknown = vocab.encode(words)
    for w in unknown:
        print(f"warning: unknown token {w!r} mapped to {vocab.tokens[0]}", file=sys.stderr)
    V = project_regions(feats[args.index], params)
    E, _ = encode_batch([ids], params, bidirectional=run.bidirectional)
    trace = attention.score_pair(V, E[0], run.scan())
    return trace, words, ids, unknown, run


def _trace_doc(trace, words, ids, unknown, run):
    k = trace.sim.shape[0]
    doc = {"words": words, "token_ids": ids, "unknown_tokens": unknown, "region_count": k,
           "direction": trace.direction.value, "config": run.scan().to_dict(),
           "similarity": trace.sim.tolist(), "weights": trace.weights.tolist(),
           "relevance": trace.relevance.tolist(), "score": trace.score}
    if run.scan().method is attention.Method.SCAN:
        if trace.direction is Direction.TEXT_IMAGE:
            doc["weights_softmax_axis"] = "regions"
            doc["relevance_anchor"] = "word"
            doc["argmax_region_per_word"] = [int(i) for i in np.argmax(trace.weights, axis=0)]
        else:
            doc["weights_softmax_axis"] = "words"
            doc["relevance_anchor"] = "region"
            doc["argmax_word_per_region"] = [int(j) for j in np.argmax(trace.weights, axis=1)]
    return doc


def cmd_score(args):
    trace, words, ids, unknown, run = pair_trace(args)
    if args.json:
        doc = _trace_doc(trace, words, ids, unknown, run) if args.trace else {"score": trace.score}
        sys.stdout.write(_json_dump(doc))
        return 0
    print(f"{trace.score:.6f}")
    if args.trace:
        print("relevance  " + " ".join(f"{r:.6f}" for r in trace.relevance))
        print("weights (regions x words)")
        print("\t" + "\t".join(words))
        for i, row in enumerate(trace.weights):
            print(f"r{i}\t" + "\t".join(f"{w:.6f}" for w in row))
    return 0


def cmd_attend(args):
    trace, words, ids, unknown, run = pair_trace(args)
    atomic_write(args.out, _json_dump(_trace_doc(trace, words, ids, unknown, run)).encode())
    print(f"{trace.score:.6f}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "score": cmd_score, "attend": cmd_attend}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ScanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
