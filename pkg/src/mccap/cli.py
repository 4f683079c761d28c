"""Command-line pipeline driver.

One subcommand per stage: synthesize or tokenize a corpus, train caption
embeddings, mine the multiple-choice dataset, split it, train and evaluate
models, run the rater service, and aggregate its log. Every produced
artifact gets a RunManifest sidecar, and every stage takes --seed.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .baselines import (
    BilinearConfig,
    eval_bilinear,
    eval_c2i,
    eval_i2c,
    fit_linear_map,
    load_bilinear,
    load_linear_map,
    make_projections,
    save_bilinear,
    save_linear_map,
    train_bilinear,
    training_pairs,
)
from .corpus import (
    Vocabulary,
    generate_synthetic_corpus,
    load_paired_corpus,
    read_captions_jsonl,
    tokenize,
    write_paired_corpus,
)
from .dataset import SplitSpec, by_split, generate_mcic, read_dataset, split_dataset, write_dataset
from .evalserve import (
    ENV_BIND,
    ENV_DATASET,
    ENV_IMAGES,
    ENV_LOG,
    ServiceState,
    aggregate,
    create_app,
    load_image_manifest,
    read_log,
)
from .manifest import make_manifest, write_manifest
from .metrics import accuracy, cider, corpus_rouge_l, write_eval_report
from .neural import (
    TrainConfig,
    generate_caption,
    load_ffnn,
    load_vec2seq,
    lower_instances,
    predict_batch,
    predict_instance,
    ffnn_train,
    save_ffnn,
    save_vec2seq,
    vec2seq_train,
    write_training_log,
)
from .pvembed import PVGrid, PVHyperParams, PVModel, optimize_pv, train_pv
from .scoring import ScoreParams, optimize_lambda, write_grid_table

METRIC_NAMES = ("accuracy", "rouge_l", "cider")
DEFAULT_BIND = "127.0.0.1:8000"


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _write_manifests(args, inputs: dict, outputs: dict) -> None:
    params = {}
    for key, value in vars(args).items():
        if key == "func" or key.startswith("_"):
            continue
        params[key] = str(value) if isinstance(value, Path) else value
    man = make_manifest(args._subcommand, params, inputs, outputs,
                        getattr(args, "seed", None))
    for path in outputs.values():
        write_manifest(man, path)


def _load_corpus(args):
    return load_paired_corpus(args.captions, args.embeddings,
                              min_count=args.min_count)


def _split_instances(instances, name):
    if name == "all":
        return list(instances)
    chosen = by_split(instances).get(name, [])
    if not chosen:
        raise CliError(f"no instances in split {name!r}")
    return chosen


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    corpus = generate_synthetic_corpus(args.seed, args.images,
                                       args.captions_per_image,
                                       vocab_size=args.vocab_size,
                                       d_img=args.d_img,
                                       content_words=args.content_words,
                                       noise_sigma=args.noise_sigma)
    write_paired_corpus(corpus, args.out_captions, args.out_embeddings)
    _write_manifests(args, {}, {"captions": args.out_captions,
                                "embeddings": args.out_embeddings})
    print(f"wrote {len(corpus.captions)} captions for {corpus.n_images} "
          f"images to {args.out_captions}")
    return 0


def _cmd_tokenize(args) -> int:
    rows = read_captions_jsonl(args.captions)
    vocab = Vocabulary.build([tokenize(row["text"]) for row in rows],
                             min_count=args.min_count)
    vocab.save(args.out_vocab)
    _write_manifests(args, {"captions": args.captions},
                     {"vocab": args.out_vocab})
    print(f"vocabulary of {len(vocab)} types from {len(rows)} captions")
    return 0


def _cmd_train_pv(args) -> int:
    corpus = _load_corpus(args)
    hp = PVHyperParams(dim=args.dim, epochs=args.epochs,
                       initial_lr=args.lr, seed=args.seed,
                       negative=args.negative)
    if args.grid:
        dims = tuple(int(d) for d in args.grid.split(","))
        best_hp, model, table = optimize_pv(corpus, PVGrid(dims, (args.epochs,)), hp)
        grid_path = args.grid_table or f"{args.out}.grid.csv"
        write_grid_table([(dim, rank) for dim, _, rank in table], "dim",
                         grid_path)
        model.save(args.out)
        _write_manifests(args, {"captions": args.captions,
                                "embeddings": args.embeddings},
                         {"model": args.out, "grid_table": grid_path})
        print(f"grid best dim={best_hp.dim} "
              f"(mean sibling rank {min(r for _, _, r in table):.3f})")
    else:
        model = train_pv(corpus, hp)
        model.save(args.out)
        _write_manifests(args, {"captions": args.captions,
                                "embeddings": args.embeddings},
                         {"model": args.out})
        print(f"trained {model.dim}-d caption embeddings "
              f"({len(corpus.captions)} captions, {args.epochs} epochs)")
    return 0


def _cmd_gen(args) -> int:
    corpus = _load_corpus(args)
    pv = PVModel.load(args.pv)
    params = ScoreParams(blend_lambda=args.blend_lambda,
                         threshold=args.threshold_l,
                         top_n=args.top_n, nr_decoys=args.nr_decoys)
    threads = args.threads or os.cpu_count() or 1
    instances = generate_mcic(corpus, pv, params, n_threads=threads)
    write_dataset(instances, args.out)
    _write_manifests(args, {"captions": args.captions,
                            "embeddings": args.embeddings, "pv": args.pv},
                     {"dataset": args.out})
    print(f"wrote {len(instances)} instances to {args.out}")
    return 0


def _cmd_split(args) -> int:
    instances = read_dataset(args.dataset)
    split = split_dataset(instances, SplitSpec(args.dev_images,
                                               args.test_images, args.seed))
    write_dataset(split, args.out)
    sizes = {name: len(insts) for name, insts in by_split(split).items()}
    _write_manifests(args, {"dataset": args.dataset}, {"dataset": args.out})
    print("split sizes: " + ", ".join(f"{k}={v}" for k, v in sorted(sizes.items())))
    return 0


def _cmd_train_baseline(args) -> int:
    corpus = _load_corpus(args)
    pv = PVModel.load(args.pv)
    instances = read_dataset(args.dataset)
    splits = by_split(instances)
    train = splits.get("train", [])
    dev = splits.get("dev", [])
    if not train:
        raise CliError("dataset has no train split")
    projections = make_projections(args.seed, d_img=corpus.d_img,
                                   d_pv=pv.dim, out_dim=args.proj_dim)

    if args.kind in ("i2c", "c2i"):
        inputs, targets = training_pairs(train, corpus, pv, projections,
                                         direction=args.kind)
        lin = fit_linear_map(inputs, targets, ridge=args.ridge,
                             direction=args.kind)
        save_linear_map(lin, args.out)
        if dev:
            evaluate = eval_i2c if args.kind == "i2c" else eval_c2i
            print(f"dev accuracy {evaluate(lin, projections, dev, corpus, pv):.4f}")
    else:
        cfg = BilinearConfig(lr=args.lr, epochs=args.epochs, seed=args.seed)
        model = train_bilinear(train, dev or None, projections, corpus, pv, cfg)
        save_bilinear(model, args.out)
        if dev:
            print(f"dev accuracy {eval_bilinear(model, projections, dev, corpus, pv):.4f}")
    _write_manifests(args, {"dataset": args.dataset, "captions": args.captions,
                            "embeddings": args.embeddings, "pv": args.pv},
                     {"model": args.out})
    return 0


def _train_cfg(args, lambda_gen: float = 0.0) -> TrainConfig:
    return TrainConfig(lr=args.lr, clip_norm=args.clip_norm,
                       batch_size=args.batch_size, max_steps=args.max_steps,
                       seed=args.seed, lambda_gen=lambda_gen,
                       eval_every=args.eval_every)


def _finish_training(args, model_saver, params, rows) -> int:
    model_saver(params, args.out)
    outputs = {"model": args.out}
    if args.log_csv:
        write_training_log(rows, args.log_csv)
        outputs["training_log"] = args.log_csv
    _write_manifests(args, {"dataset": args.dataset, "captions": args.captions,
                            "embeddings": args.embeddings}, outputs)
    dev_rows = [r for r in rows if r.split == "dev" and r.accuracy is not None]
    if dev_rows:
        best = max(r.accuracy for r in dev_rows)
        print(f"best dev accuracy {best:.4f} over {dev_rows[-1].step} steps")
    return 0


def _cmd_train_ffnn(args) -> int:
    corpus = _load_corpus(args)
    instances = read_dataset(args.dataset)
    params, rows = ffnn_train(instances, corpus, _train_cfg(args),
                              d_w=args.d_w, h1=args.h1, h2=args.h2)
    return _finish_training(args, save_ffnn, params, rows)


def _cmd_train_vec2seq(args) -> int:
    corpus = _load_corpus(args)
    instances = read_dataset(args.dataset)
    params, rows = vec2seq_train(instances, corpus,
                                 _train_cfg(args, lambda_gen=args.lambda_gen),
                                 dim=args.dim, h1=args.h1, h2=args.h2)
    return _finish_training(args, save_vec2seq, params, rows)


def _generation_scores(params, split_instances, corpus, wanted):
    image_ids = sorted({inst.image_id for inst in split_instances})
    hyps, refs = {}, {}
    for iid in image_ids:
        hyps[iid] = generate_caption(params, corpus.image(iid).embedding)
        refs[iid] = [list(corpus.caption(cid).tokens)
                     for cid in corpus.image_to_captions[iid]]
    scores = {}
    if "rouge_l" in wanted:
        scores["rouge_l"] = corpus_rouge_l(hyps, refs)
    if "cider" in wanted:
        scores["cider"] = cider(hyps, refs)
    return scores


def _cmd_eval(args) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in METRIC_NAMES]
    if unknown:
        raise CliError(f"unknown metrics: {', '.join(unknown)} "
                       f"(choose from {', '.join(METRIC_NAMES)})", code=2)
    corpus = _load_corpus(args)
    instances = _split_instances(read_dataset(args.dataset), args.split)
    with open(args.model, "rb") as fh:
        magic = fh.read(4)

    generation = [m for m in wanted if m != "accuracy"]
    scores = {}
    if magic == b"V2SQ":
        params = load_vec2seq(args.model)
        if "accuracy" in wanted:
            preds = predict_batch(params, lower_instances(instances, corpus))
            scores["accuracy"] = accuracy([int(p) for p in preds], instances)
        scores.update(_generation_scores(params, instances, corpus, generation))
    elif magic == b"FFNN":
        if generation:
            raise CliError("rouge_l/cider need a caption-generating model; "
                           "this checkpoint is classification-only", code=2)
        params = load_ffnn(args.model)
        preds = [predict_instance(params, inst, corpus) for inst in instances]
        scores["accuracy"] = accuracy(preds, instances)
    elif magic in (b"LMAP", b"BLIN"):
        if generation:
            raise CliError("rouge_l/cider need a caption-generating model; "
                           "this checkpoint is classification-only", code=2)
        if not args.pv:
            raise CliError("--pv is required to evaluate this model", code=2)
        pv = PVModel.load(args.pv)
        projections = make_projections(args.seed, d_img=corpus.d_img,
                                       d_pv=pv.dim, out_dim=args.proj_dim)
        if magic == b"LMAP":
            lin = load_linear_map(args.model)
            evaluate = eval_i2c if lin.direction == "i2c" else eval_c2i
            scores["accuracy"] = evaluate(lin, projections, instances, corpus, pv)
        else:
            model = load_bilinear(args.model)
            scores["accuracy"] = eval_bilinear(model, projections, instances,
                                               corpus, pv)
    else:
        raise CliError(f"{args.model}: unrecognized model file "
                       f"(magic {magic!r})")

    rows = [(name, args.split, scores[name]) for name in wanted]
    write_eval_report(rows, args.out)
    _write_manifests(args, {"dataset": args.dataset, "model": args.model},
                     {"report": args.out})
    for name, split, value in rows:
        print(f"{name} {split} {value:.4f}")
    return 0


def _cmd_grid_lambda(args) -> int:
    corpus = _load_corpus(args)
    pv = PVModel.load(args.pv)
    grid = [float(v) for v in args.lambdas.split(",")]
    best, table = optimize_lambda(pv, corpus, grid,
                                  threshold=args.threshold_l,
                                  top_n=args.top_n)
    write_grid_table(table, "lambda", args.out)
    _write_manifests(args, {"captions": args.captions,
                            "embeddings": args.embeddings, "pv": args.pv},
                     {"grid_table": args.out})
    print(f"best lambda {best}")
    return 0


def _serve_setting(flag_value, env_name, what):
    value = flag_value or os.environ.get(env_name)
    if not value:
        raise CliError(f"{what} required (flag or ${env_name})", code=2)
    return value


def _cmd_serve(args) -> int:
    bind = args.bind or os.environ.get(ENV_BIND) or DEFAULT_BIND
    dataset_path = _serve_setting(args.dataset, ENV_DATASET, "--dataset")
    images_path = _serve_setting(args.images, ENV_IMAGES, "--images")
    log_path = _serve_setting(args.log, ENV_LOG, "--log")
    host, _, port_text = bind.rpartition(":")
    if not host or not port_text.isdigit():
        raise CliError(f"--bind must look like host:port, got {bind!r}", code=2)

    state = ServiceState(read_dataset(dataset_path),
                         load_image_manifest(images_path), log_path)
    _write_manifests(args, {"dataset": dataset_path, "images": images_path},
                     {"log": log_path})
    app = create_app(state)
    import uvicorn

    uvicorn.run(app, host=host, port=int(port_text))
    return 0


def _cmd_report(args) -> int:
    report = aggregate(read_log(args.log))
    text = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        _write_manifests(args, {"log": args.log}, {"report": args.out})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_corpus_inputs(sub):
    sub.add_argument("--captions", required=True, help="captions JSON-lines file")
    sub.add_argument("--embeddings", required=True, help="image embedding store")
    sub.add_argument("--min-count", type=int, default=5,
                     help="vocabulary frequency floor")


def _add_training_flags(sub):
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--out", required=True, help="model checkpoint path")
    sub.add_argument("--log-csv", default=None, help="training curve CSV")
    sub.add_argument("--h1", type=int, default=64)
    sub.add_argument("--h2", type=int, default=16)
    sub.add_argument("--lr", type=float, default=0.01)
    sub.add_argument("--clip-norm", type=float, default=4.0)
    sub.add_argument("--batch-size", type=int, default=20)
    sub.add_argument("--max-steps", type=int, default=2000)
    sub.add_argument("--eval-every", type=int, default=200)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmc",
        description="Adversarial multiple-choice caption datasets: build, "
                    "train, evaluate, and collect human judgments.")
    parser.add_argument("--version", action="version",
                        version=f"dmc {__version__}")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    def new(name, helptext, handler):
        sub = subs.add_parser(name, help=helptext)
        sub.set_defaults(func=handler, _subcommand=name)
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--config", default=None,
                         help="key=value file of defaults; flags win")
        return sub

    sub = new("synth", "generate a synthetic paired corpus", _cmd_synth)
    sub.add_argument("--out-captions", required=True)
    sub.add_argument("--out-embeddings", required=True)
    sub.add_argument("--images", type=int, default=500)
    sub.add_argument("--captions-per-image", type=int, default=5)
    sub.add_argument("--vocab-size", type=int, default=120)
    sub.add_argument("--d-img", type=int, default=64)
    sub.add_argument("--content-words", type=int, default=8)
    sub.add_argument("--noise-sigma", type=float, default=0.1)

    sub = new("tokenize", "build and save a vocabulary", _cmd_tokenize)
    sub.add_argument("--captions", required=True)
    sub.add_argument("--min-count", type=int, default=5)
    sub.add_argument("--out-vocab", required=True)

    sub = new("train-pv", "train caption embeddings", _cmd_train_pv)
    _add_corpus_inputs(sub)
    sub.add_argument("--dim", type=int, default=100)
    sub.add_argument("--epochs", type=int, default=10)
    sub.add_argument("--lr", type=float, default=0.025)
    sub.add_argument("--negative", type=int, default=0,
                     help="noise words per step; 0 = exact softmax")
    sub.add_argument("--grid", default=None,
                     help="comma-separated dims to search by sibling rank")
    sub.add_argument("--grid-table", default=None,
                     help="where to write the search table CSV")
    sub.add_argument("--out", required=True)

    sub = new("gen", "mine the multiple-choice dataset", _cmd_gen)
    _add_corpus_inputs(sub)
    sub.add_argument("--pv", required=True, help="caption embedding model")
    sub.add_argument("--lambda", dest="blend_lambda", type=float, default=0.3)
    sub.add_argument("--threshold-l", type=float, default=0.5)
    sub.add_argument("--top-n", type=int, default=500)
    sub.add_argument("--nr-decoys", type=int, default=4)
    sub.add_argument("--threads", type=int, default=None,
                     help="search threads (default: machine parallelism)")
    sub.add_argument("--out", required=True)

    sub = new("split", "assign instances to train/dev/test", _cmd_split)
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--dev-images", type=int, required=True)
    sub.add_argument("--test-images", type=int, required=True)
    sub.add_argument("--out", required=True)

    sub = new("train-baseline", "fit a linear or bilinear baseline",
              _cmd_train_baseline)
    _add_corpus_inputs(sub)
    sub.add_argument("--kind", choices=("i2c", "c2i", "bilinear"),
                     required=True)
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--pv", required=True)
    sub.add_argument("--proj-dim", type=int, default=256)
    sub.add_argument("--ridge", type=float, default=1e-3)
    sub.add_argument("--lr", type=float, default=0.01)
    sub.add_argument("--epochs", type=int, default=20)
    sub.add_argument("--out", required=True)

    sub = new("train-ffnn", "train the feed-forward classifier",
              _cmd_train_ffnn)
    _add_corpus_inputs(sub)
    _add_training_flags(sub)
    sub.add_argument("--d-w", type=int, default=64,
                     help="word/image feature width")

    sub = new("train-vec2seq", "train the caption-generating classifier",
              _cmd_train_vec2seq)
    _add_corpus_inputs(sub)
    _add_training_flags(sub)
    sub.add_argument("--dim", type=int, default=64,
                     help="embedding and recurrent state width")
    sub.add_argument("--lambda-gen", type=float, default=1.0)

    sub = new("eval", "score a trained model on a dataset split", _cmd_eval)
    _add_corpus_inputs(sub)
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--model", required=True)
    sub.add_argument("--split", default="test",
                     choices=("train", "dev", "test", "all"))
    sub.add_argument("--metrics", default="accuracy",
                     help="comma-separated: accuracy,rouge_l,cider")
    sub.add_argument("--pv", default=None,
                     help="caption embeddings (linear/bilinear models)")
    sub.add_argument("--proj-dim", type=int, default=256)
    sub.add_argument("--out", required=True, help="report CSV path")

    sub = new("grid-lambda", "search the decoy blend weight", _cmd_grid_lambda)
    _add_corpus_inputs(sub)
    sub.add_argument("--pv", required=True)
    sub.add_argument("--lambdas", required=True,
                     help="comma-separated grid, e.g. 0.0,0.3,0.5")
    sub.add_argument("--threshold-l", type=float, default=0.5)
    sub.add_argument("--top-n", type=int, default=500)
    sub.add_argument("--out", required=True)

    sub = new("serve", "run the rater service", _cmd_serve)
    sub.add_argument("--bind", default=None, help=f"host:port (default {DEFAULT_BIND})")
    sub.add_argument("--dataset", default=None)
    sub.add_argument("--images", default=None, help="image-URL manifest JSON")
    sub.add_argument("--log", default=None, help="append-only response log")

    sub = new("report", "aggregate a rater response log", _cmd_report)
    sub.add_argument("--log", required=True)
    sub.add_argument("--out", default=None, help="also write the JSON here")

    return parser


def _read_config_flags(path) -> list[str]:
    flags = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise CliError(f"{path}:{lineno}: expected key=value, got "
                               f"{line!r}", code=2)
            flags += [f"--{key.strip().replace('_', '-')}", value.strip()]
    return flags


def _apply_config(argv: list[str]) -> list[str]:
    """Splice config-file entries in as flags, before explicit ones."""
    path = None
    rest = []
    i = 0
    while i < len(argv):
        token = argv[i]
        if token == "--config":
            if i + 1 >= len(argv):
                raise CliError("--config needs a file path", code=2)
            path = argv[i + 1]
            i += 2
        elif token.startswith("--config="):
            path = token.split("=", 1)[1]
            i += 1
        else:
            rest.append(token)
            i += 1
    if path is None:
        return argv
    if not rest:
        raise CliError("--config requires a subcommand", code=2)
    return [rest[0]] + _read_config_flags(path) + rest[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _apply_config(argv)
    except CliError as exc:
        print(f"dmc: error: {exc}", file=sys.stderr)
        return exc.code
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dmc: error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError) as exc:
        print(f"dmc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
