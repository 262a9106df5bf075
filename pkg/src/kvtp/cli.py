"""``kvtp`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad input file or format, 3 numerical
failure, 4 external model client failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import allocator, costmodel, curation, predictor, pruners
from .matrix_io import MatrixFormatError, parse_vector, read_matrix
from .simulate import DEFAULT_TEMPERATURES, SimulationConfig, metrics_csv, run_simulation
from .synthetic import SyntheticSpec, generate_synthetic

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("kvtp")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC, EXIT_CLIENT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _read_vector(path) -> np.ndarray:
    m = read_matrix(path)
    if 1 not in m.shape:
        raise MatrixFormatError(f"{path}: expected a single row or column, got {m.shape}")
    return m.ravel()


def _scores_arg(args) -> np.ndarray:
    if args.scores is not None:
        return parse_vector(args.scores)
    if args.scores_file is not None:
        return _read_vector(args.scores_file)
    raise UsageError("give --scores or --scores-file")


def _alloc_config(args) -> allocator.AllocationConfig:
    try:
        return allocator.AllocationConfig(alpha=args.alpha, temperature=args.temperature, max_ratio=args.max_ratio)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- commands ----------------------------------------------------------------


def cmd_score(args) -> int:
    params = predictor.load_params(args.params) if args.params else predictor.PredictorParams()
    frames = predictor.EmbeddingSequence(read_matrix(args.frames), args.clip_size)
    query = _read_vector(args.query)
    logits = predictor.predict_scores(params, frames, query)
    if args.json:
        print(json.dumps({"logits": logits.tolist()}))
    else:
        print("\n".join(f"{i}, {v:.9g}" for i, v in enumerate(logits)))
    return EXIT_OK


def cmd_allocate(args) -> int:
    scores = _scores_arg(args)
    cfg = _alloc_config(args)
    ratios = allocator.allocate(scores, cfg)
    budgets = allocator.to_token_budgets(ratios, args.tokens_per_frame)
    report = allocator.sparsity(scores, cfg, beta=args.beta, min_frames=args.min_frames)
    print(allocator.format_report(scores, ratios, budgets, report, as_json=args.json))
    return EXIT_OK


def _load_token_frames(args) -> list[pruners.FrameTokenSet]:
    tokens = read_matrix(args.tokens)
    p = args.tokens_per_frame
    if tokens.shape[0] % p:
        raise MatrixFormatError(f"{tokens.shape[0]} token rows is not a multiple of {p}")
    saliency = _read_vector(args.saliency) if args.saliency else None
    if saliency is not None and saliency.size != tokens.shape[0]:
        raise MatrixFormatError(f"{saliency.size} saliency values for {tokens.shape[0]} tokens")
    frames = []
    for i in range(tokens.shape[0] // p):
        sal = saliency[i * p : (i + 1) * p] if saliency is not None else None
        frames.append(pruners.FrameTokenSet(tokens[i * p : (i + 1) * p], sal, frame_index=i))
    return frames


def cmd_prune(args) -> int:
    frames = _load_token_frames(args)
    p = args.tokens_per_frame
    if args.budgets_file:
        budgets = _read_vector(args.budgets_file).astype(int)
    else:
        scores = _scores_arg(args)
        if scores.size != len(frames):
            raise MatrixFormatError(f"{scores.size} scores for {len(frames)} frames")
        if args.backend == "hard":
            budgets = (allocator.hard_allocation(scores, args.alpha) * p).astype(int)
        else:
            budgets = allocator.to_token_budgets(allocator.allocate(scores, _alloc_config(args)), p)
    pruned = pruners.prune_video(frames, budgets, args.backend, seed=args.seed, merge_dropped=args.merge_dropped)
    out = Path(args.out)
    pruned.save(out.with_suffix(".bin"), out.with_suffix(".index.csv"))
    print(f"retained {pruned.total_tokens} of {len(frames) * p} tokens -> {out.with_suffix('.bin')}")
    return EXIT_OK


def load_corpus(path) -> list[predictor.TrainingSample]:
    """Newline-delimited JSON: ``{"frames": file, "query": file, "labels": [...] | file, "clip_size": n}``.

    Relative file names resolve against the corpus file's directory.
    """
    base = Path(path).parent
    samples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            frames = read_matrix(base / d["frames"])
            query = _read_vector(base / d["query"])
            labels = d["labels"]
            labels = np.asarray(labels, dtype=float) if isinstance(labels, list) else _read_vector(base / labels)
            seq = predictor.EmbeddingSequence(frames, int(d.get("clip_size", 8)))
            samples.append(predictor.TrainingSample(seq, query, labels))
        except (KeyError, json.JSONDecodeError) as exc:
            raise MatrixFormatError(f"{path}:{lineno}: {exc}") from None
    return samples


def cmd_train(args) -> int:
    if args.synthetic:
        spec = SyntheticSpec(videos=args.synthetic, seed=args.seed, clip_size=args.clip_size)
        samples = [v.sample for v in generate_synthetic(spec)]
    elif args.corpus:
        samples = load_corpus(args.corpus)
    else:
        raise UsageError("give --corpus or --synthetic")
    init = predictor.load_params(args.init) if args.init else None
    cfg = predictor.TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        momentum=args.momentum,
        train_mixing=not args.freeze_mixing,
        train_adapter=not args.no_adapter,
    )
    if args.no_adapter and init is None:
        init = predictor.PredictorParams()
    result = predictor.train(samples, cfg, init)
    predictor.save_params(result.params, args.out)
    if args.trace:
        lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(result.loss_trace)]
        Path(args.trace).write_text("\n".join(lines) + "\n")
    if args.export:
        Path(args.export).write_text(predictor.export_text(result.params))
    last = f"{result.loss_trace[-1]:.6f}" if result.loss_trace else "n/a"
    print(f"trained {len(samples)} samples for {args.epochs} epochs, final loss {last} -> {args.out}")
    return EXIT_OK


def _make_client(args):
    if args.mock:
        return curation.MockLlmClient()
    return curation.HttpChatClient(model=args.model, timeout=args.timeout,
                                   retry=curation.RetryPolicy(attempts=args.retries))


def cmd_curate(args) -> int:
    cfg = curation.CurationConfig(
        alpha=args.alpha,
        beta=args.beta,
        temperature=args.temperature,
        clip_size=args.clip_size,
        min_frames=args.min_frames,
        eval_sources=tuple(s for s in args.eval_sources.split(",") if s),
    )
    if args.items:
        result = curation.run_pipeline(curation.load_items(args.items), _make_client(args), cfg, args.out,
                                       concurrency=args.concurrency)
    elif args.records:
        paths = sorted(Path(args.records).glob("*.json"))
        records = []
        for p in paths:
            try:
                records.append((str(p), curation.DatasetRecord.load(p)))
            except (ValueError, KeyError) as exc:
                log.warning("skip %s: %s", p, exc)
                records.append((str(p), None))
        result = curation.curate(records, cfg)
        curation.write_manifests(result, args.out)
    else:
        raise UsageError("give --items or --records")
    print(f"eval {len(result.eval)}, train {len(result.train)}, excluded {len(result.excluded)} -> {args.out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    spec = costmodel.BackboneSpec(args.layers, args.model_dim, args.ffn_dim, args.text_tokens, args.overhead)
    full = args.frames * args.tokens_per_frame
    methods = {}
    for k in args.keep:
        methods[f"pruned@{k:g}"] = k
        methods[f"pruned@{k:g}+kvtp"] = k
    rows = costmodel.flops_table(spec, full, methods)
    print(costmodel.format_csv(rows).rstrip("\n") if args.csv else costmodel.format_table(rows))
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = SyntheticSpec(
        frames_per_video=args.frames,
        dim=args.dim,
        tokens_per_frame=args.tokens_per_frame,
        keyframe_count=args.keyframes,
        signal_strength=args.signal_strength,
        clip_size=args.clip_size,
        seed=args.seed,
    )
    cfg = SimulationConfig(
        synthetic=spec,
        train_videos=args.train_videos,
        test_videos=args.test_videos,
        retention_videos=args.retention_videos,
        alpha=args.alpha,
        temperatures=args.temperatures,
        betas=args.betas,
        backend=args.backend,
        train=replace(predictor.TrainConfig(), epochs=args.epochs, seed=args.seed),
    )
    rows, _, _ = run_simulation(cfg)
    text = metrics_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvtp", description="Keyframe-oriented vision token pruning tools.")
    parser.add_argument("--config", help="TOML file of key = value defaults for the chosen command")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def alloc_flags(p, alpha=0.2):
        p.add_argument("--alpha", type=float, default=alpha, help="mean keep ratio")
        p.add_argument("--temperature", type=float, default=1.0)
        p.add_argument("--max-ratio", type=float, default=1.0)

    def score_flags(p):
        p.add_argument("--scores", help="comma-separated scores, e.g. 0,0,5,0")
        p.add_argument("--scores-file")

    p = sub.add_parser("score", help="per-frame relevance logits")
    p.add_argument("--frames", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--params")
    p.add_argument("--clip-size", type=int, default=8)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("allocate", help="scores to keep ratios and token budgets")
    score_flags(p)
    alloc_flags(p)
    p.add_argument("--tokens-per-frame", type=int, default=costmodel.CALIBRATION_TOKENS_PER_FRAME)
    p.add_argument("--beta", type=float, default=1.5)
    p.add_argument("--min-frames", type=int, default=allocator.MIN_FRAMES)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("prune", help="prune a token matrix with per-frame budgets")
    p.add_argument("--tokens", required=True, help="(frames x P) x d_v token matrix")
    p.add_argument("--tokens-per-frame", type=int, required=True)
    p.add_argument("--saliency")
    p.add_argument("--budgets-file")
    score_flags(p)
    alloc_flags(p)
    p.add_argument("--backend", choices=pruners.BACKENDS, default="saliency")
    p.add_argument("--merge-dropped", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix; writes .bin and .index.csv")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("train", help="fit predictor parameters")
    p.add_argument("--corpus")
    p.add_argument("--synthetic", type=int, default=0, help="train on N generated videos instead")
    p.add_argument("--init")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--export", help="also write a key = value text dump")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--clip-size", type=int, default=8)
    p.add_argument("--freeze-mixing", action="store_true")
    p.add_argument("--no-adapter", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("curate", help="annotate videos and write eval/train manifests")
    p.add_argument("--items", help="JSONL of {path, question, frame_count}")
    p.add_argument("--records", help="directory of existing record JSON files")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=1.5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--clip-size", type=int, default=8)
    p.add_argument("--min-frames", type=int, default=64)
    p.add_argument("--eval-sources", default=",".join(curation.DEFAULT_EVAL_SOURCES))
    p.add_argument("--mock", action="store_true", help="use the deterministic offline client")
    p.add_argument("--model", default="gpt-4o")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--concurrency", type=int, default=4)
    p.set_defaults(func=cmd_curate)

    cal = costmodel.CALIBRATION_SPEC
    p = sub.add_parser("flops", help="analytical FLOPs table")
    p.add_argument("--layers", type=int, default=cal.layers)
    p.add_argument("--model-dim", type=int, default=cal.model_dim)
    p.add_argument("--ffn-dim", type=int, default=cal.ffn_dim)
    p.add_argument("--text-tokens", type=int, default=cal.text_tokens)
    p.add_argument("--overhead", type=float, default=cal.predictor_overhead_flops)
    p.add_argument("--frames", type=int, default=costmodel.CALIBRATION_FRAMES)
    p.add_argument("--tokens-per-frame", type=int, default=costmodel.CALIBRATION_TOKENS_PER_FRAME)
    p.add_argument("--keep", type=_floats, default=(0.2,))
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("simulate", help="full synthetic pipeline, metrics as CSV")
    p.add_argument("--train-videos", type=int, default=300)
    p.add_argument("--test-videos", type=int, default=200)
    p.add_argument("--retention-videos", type=int, default=100)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--tokens-per-frame", type=int, default=16)
    p.add_argument("--keyframes", type=int, default=2)
    p.add_argument("--signal-strength", type=float, default=0.6)
    p.add_argument("--clip-size", type=int, default=8)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--temperatures", type=_floats, default=DEFAULT_TEMPERATURES)
    p.add_argument("--betas", type=_floats, default=(1.0,))
    p.add_argument("--beta", type=float, dest="betas_single", help="shorthand for a single --betas value")
    p.add_argument("--backend", choices=pruners.BACKENDS[:3], default="saliency")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)
    parser.subcommands = sub.choices
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config, "rb") as fh:
        values = tomllib.load(fh)
    command = next((a for a in rest if not a.startswith("-")), None)
    sub = parser.subcommands.get(command) if command else None
    if sub is None:
        return
    defaults = {k.replace("-", "_"): v for k, v in values.items() if not isinstance(v, dict)}
    defaults.update({k.replace("-", "_"): v for k, v in values.get(command, {}).items()})
    for key in ("temperatures", "betas", "keep"):
        if isinstance(defaults.get(key), list):
            defaults[key] = tuple(float(x) for x in defaults[key])
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        print(f"kvtp: bad config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    args = parser.parse_args(argv)
    if getattr(args, "betas_single", None) is not None:
        args.betas = (args.betas_single,)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kvtp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except predictor.TrainingDiverged as exc:
        print(f"kvtp {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except curation.ClientError as exc:
        print(f"kvtp {args.command}: client failure: {exc}", file=sys.stderr)
        return EXIT_CLIENT
    except FloatingPointError as exc:
        print(f"kvtp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"kvtp {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
