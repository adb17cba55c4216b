"""Command-line entry point: ``disco <subcommand> ...``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .concepts import Caption, ClientConfig, extract_rule_based, extract_via_client, write_concept_file
from .errors import (ConfigError, DiscoError, NumericOverflowError, PartitionMismatchError)
from .synth import SynthSpec, generate_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("disco")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _train_config(args):
    from .train import TrainConfig

    data = _read_json(args.config) if args.config else {}
    config = TrainConfig.from_dict(data)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if getattr(args, "steps", None):
        config = config.replace(steps=args.steps)
    return config


def _dump(obj, out) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        print(text)


# ---- subcommands ---------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    data = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    dataset = generate_dataset(SynthSpec.from_dict(data))
    path = write_dataset(dataset, args.out or "synth")
    print(f"wrote {len(dataset)} videos -> {path}")
    return EXIT_OK


def cmd_extract_concepts(args) -> int:
    dataset = read_dataset(args.data)
    client = ClientConfig.from_env() if args.external else None
    rows = []
    for video in dataset.videos:
        caption = Caption(video.id, video.caption)
        found = extract_via_client(caption, client) if client else extract_rule_based(caption)
        rows.append((video.id, video.caption, found.concepts))
    out = args.out or "concepts.jsonl"
    write_concept_file(out, rows)
    print(f"wrote concepts for {len(rows)} videos -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .metrics import evaluate
    from .train import save_checkpoint, train

    config = _train_config(args)
    dataset = read_dataset(args.data)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)

    def report(entry):
        if entry["step"] % max(1, args.log_every) == 0:
            log.info("step %d total %.6f", entry["step"], entry["losses"]["total"])

    ckpt, steps = train(config, dataset, log_path=out / "steps.jsonl", on_step=report)
    ckpt.metrics = {**ckpt.metrics, **evaluate(ckpt, dataset).to_dict()["aggregate"]}
    path = save_checkpoint(ckpt, out)
    print(f"trained {len(steps)} steps; final total {steps[-1]['losses']['total']:.6f} -> {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .train import load_checkpoint

    config = _train_config(args) if args.config else None
    report = evaluate(load_checkpoint(args.checkpoint), read_dataset(args.data), config)
    _dump(report.to_dict(), args.out)
    return EXIT_OK


def cmd_export_sim(args) -> int:
    from .metrics import export_similarity
    from .train import load_checkpoint

    out = args.out or f"{args.video}_similarity.csv"
    export_similarity(load_checkpoint(args.checkpoint), read_dataset(args.data), args.video, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_export_attn(args) -> int:
    from .metrics import export_attention
    from .train import load_checkpoint

    out = args.out or "attention"
    weights = export_attention(load_checkpoint(args.checkpoint), read_dataset(args.data),
                               args.video, args.group, out, pgm=not args.no_pgm)
    print(f"wrote {weights.shape[0]} frame grids -> {out}")
    return EXIT_OK


def cmd_token_sweep(args) -> int:
    from .metrics import token_sweep

    report = token_sweep(_train_config(args), args.counts, read_dataset(args.data))
    _dump(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradient_suite

    reports = gradient_suite(seed=args.seed or 0, step=args.step, order=args.order)
    rows = {name: {"max_rel_error": r.max_rel_error, "worst": r.worst, "passed": r.passed(args.tol)}
            for name, r in reports.items()}
    _dump(rows, args.out)
    return EXIT_OK if all(r["passed"] for r in rows.values()) else EXIT_FAIL


# ---- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disco", description="Concept-distinct video resampler toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, data=False, checkpoint=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output path")
        if data:
            p.add_argument("--data", required=True, help="dataset manifest.json")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory or checkpoint.json")
        p.set_defaults(func=fn)
        return p

    add("gen-synth", cmd_gen_synth, "generate a planted-concept dataset")
    p = add("extract-concepts", cmd_extract_concepts, "extract concepts from dataset captions", data=True)
    p.add_argument("--external", action="store_true", help="use the LLM endpoint from DISCO_LLM_URL")
    p = add("train", cmd_train, "train and write a checkpoint", data=True)
    p.add_argument("--steps", type=int, help="override the number of steps")
    p.add_argument("--log-every", type=int, default=50)
    add("eval", cmd_eval, "compute distinctness and coherence metrics", data=True, checkpoint=True)
    p = add("export-sim", cmd_export_sim, "write a group x concept similarity CSV", data=True, checkpoint=True)
    p.add_argument("--video", required=True)
    p = add("export-attn", cmd_export_attn, "write per-frame attention grids of one group",
            data=True, checkpoint=True)
    p.add_argument("--video", required=True)
    p.add_argument("--group", type=int, required=True)
    p.add_argument("--no-pgm", action="store_true")
    p = add("token-sweep", cmd_token_sweep, "train one model per token count", data=True)
    p.add_argument("--counts", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--steps", type=int, help="override the number of steps")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss term")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--order", type=int, choices=(2, 4), default=4)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PartitionMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericOverflowError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DiscoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
