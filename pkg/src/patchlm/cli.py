"""Single entry point: count-tokens, patchify, train, generate, eval, bench.

Exit codes: 0 success, 1 contract/config error, 2 I/O error. With
--json-errors failures are additionally written to stderr as one JSON object
{"error": <class>, "message": <text>}.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import evaluate as ev
from .checkpoint import load_model, save_model
from .errors import ConfigError, ContractError, DataError
from .lora import LoraConfig, load_adapters
from .model import ModelConfig, init_params
from .patchify import load_image, parse_policy, patchify, token_budget
from .train import MixtureManifest, TrainConfig, train

log = logging.getLogger("patchlm")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return obj


def build_parser() -> _Parser:
    parser = _Parser(prog="patchlm", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="seed for every rng stream")
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    parser.add_argument("--json-errors", action="store_true", help="machine-readable errors on stderr")
    parser.add_argument("--config", default=None, help="JSON config file; flags override its values")
    parser.add_argument("--checkpoint-dir", default=None, help="default output dir for train")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-tokens", help="image/newline token budget for a resolution")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)

    p = sub.add_parser("patchify", help="patch-grid summary for an image")
    p.add_argument("--in", dest="image", required=True)
    p.add_argument("--resolution", default="original")
    p.add_argument("--summary", action="store_true", help="print grid summary JSON (default)")

    p = sub.add_parser("train", help="instruction-tune on a mixture manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--resolution", default="fixed:512")
    p.add_argument("--mode", choices=["full", "lora"], default="full")
    p.add_argument("--out", default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--warmup-ratio", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--lora-r", type=int, default=None)
    p.add_argument("--lora-alpha", type=float, default=None)
    p.add_argument("--init-checkpoint", default=None, help="start from an existing checkpoint")

    p = sub.add_parser("generate", help="greedy-decode an answer for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapters", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--resolution", default="original")
    p.add_argument("--max-new", type=int, default=32)

    p = sub.add_parser("eval", help="run evaluation protocols over a QA dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapters", default=None)
    p.add_argument("--protocol", choices=["mc", "freeform", "both"], default="both")
    p.add_argument("--judge", choices=["stub", "external"], default="stub")
    p.add_argument("--resolution", default="original")
    p.add_argument("--max-new", type=int, default=24)
    p.add_argument("--judge-concurrency", type=int, default=4)
    p.add_argument("--out", default=None, help="also write the report JSON here")

    p = sub.add_parser("bench", help="tokens/sec throughput of the forward path")
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--window", type=float, default=60.0)
    p.add_argument("--text-tokens", type=int, default=100)
    p.add_argument("--path", choices=["reference", "blocked"], default="blocked")
    p.add_argument("--checkpoint", default=None, help="bench this model instead of a fresh init")
    p.add_argument("--out", default=None)
    return parser


def _model_config(overrides: dict) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(overrides) - fields
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**overrides)


def _check_train_keys(overrides: dict) -> dict:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    reserved = {"resolution", "mode", "lora", "seed"}  # owned by flags
    unknown = (set(overrides) - fields) | (set(overrides) & reserved)
    if unknown:
        raise ConfigError(f"unsupported train config keys: {sorted(unknown)}")
    return overrides


def _cmd_count_tokens(args, cfg_file) -> int:
    image_tokens, newline_tokens = token_budget(args.width, args.height)
    print(json.dumps({"image_tokens": image_tokens, "newline_tokens": newline_tokens}))
    return 0


def _cmd_patchify(args, cfg_file) -> int:
    policy = parse_policy(args.resolution)
    rng = np.random.default_rng(args.seed)
    grid = patchify(load_image(args.image), policy, rng)
    print(
        json.dumps(
            {
                "rows": grid.rows,
                "cols": grid.cols,
                "patch_tokens": grid.rows * grid.cols,
                "newline_tokens": grid.rows,
                "sequence_length": grid.layout_len,
            }
        )
    )
    return 0


def _cmd_train(args, cfg_file) -> int:
    out_dir = args.out or args.checkpoint_dir
    if out_dir is None:
        raise ConfigError("train needs --out (or global --checkpoint-dir)")
    manifest = MixtureManifest.load(args.manifest)
    model_cfg = _model_config(cfg_file.get("model", {}))

    train_overrides = _check_train_keys(dict(cfg_file.get("train", {})))
    flag_values = {
        "batch_size": args.batch_size,
        "lr": args.lr,
        "epochs": args.epochs,
        "weight_decay": args.weight_decay,
        "warmup_ratio": args.warmup_ratio,
        "checkpoint_every": args.checkpoint_every,
    }
    train_overrides.update({k: v for k, v in flag_values.items() if v is not None})
    lora_kwargs = {}
    if args.lora_r is not None:
        lora_kwargs["r"] = args.lora_r
    if args.lora_alpha is not None:
        lora_kwargs["alpha"] = args.lora_alpha
    lora_cfg = LoraConfig(**lora_kwargs) if (args.mode == "lora" or lora_kwargs) else None
    cfg = TrainConfig(
        resolution=parse_policy(args.resolution),
        mode=args.mode,
        lora=lora_cfg,
        seed=args.seed,
        **train_overrides,
    )
    if args.init_checkpoint:
        params = load_model(args.init_checkpoint, trainable=True)
    else:
        params = init_params(model_cfg, np.random.default_rng(args.seed))
    log.info("training: %d pairs, %d epochs, mode=%s", manifest.combined_pairs, cfg.epochs, cfg.mode)
    report = train(manifest, params, cfg, out_dir=out_dir)
    final = Path(out_dir) / "model_final.plm"
    save_model(params, final)
    print(
        json.dumps(
            {
                "steps": report.steps,
                "final_loss": report.final_loss,
                "min_loss": report.min_loss,
                "checkpoints": [str(p) for p in report.checkpoints + [final]],
                "loss_log": str(report.log_path),
            }
        )
    )
    return 0


def _load_model_and_adapters(checkpoint, adapters_path):
    params = load_model(checkpoint)
    adapters = load_adapters(adapters_path, params) if adapters_path else None
    return params, adapters


def _cmd_generate(args, cfg_file) -> int:
    if args.max_new < 1:
        raise ContractError(f"--max-new must be >= 1, got {args.max_new}")
    params, adapters = _load_model_and_adapters(args.checkpoint, args.adapters)
    text = ev.decode_response(
        params,
        args.instruction,
        args.image,
        parse_policy(args.resolution),
        adapters=adapters,
        max_new=args.max_new,
        rng=np.random.default_rng(args.seed),
    )
    print(text)
    return 0


def _cmd_eval(args, cfg_file) -> int:
    params, adapters = _load_model_and_adapters(args.checkpoint, args.adapters)
    records = ev.load_qa_records(args.dataset)
    judge = ev.ExternalJudge() if args.judge == "external" else ev.StubJudge()
    verdicts = ev.evaluate_model(
        params,
        records,
        protocol=args.protocol,
        policy=parse_policy(args.resolution),
        judge=judge,
        adapters=adapters,
        max_new=args.max_new,
        judge_concurrency=args.judge_concurrency,
    )
    rep = ev.report(verdicts)
    print(ev.render_report_text(rep))
    print(json.dumps(rep))
    if args.out:
        Path(args.out).write_text(json.dumps(rep, indent=2))
    return 0


def _cmd_bench(args, cfg_file) -> int:
    if args.checkpoint:
        params = load_model(args.checkpoint)
    else:
        params = init_params(_model_config(cfg_file.get("model", {})), np.random.default_rng(args.seed))
    rng = np.random.default_rng(args.seed)
    workload = bench_mod.synthetic_workload(args.resolution, args.batch, args.text_tokens, rng)
    if args.path == "blocked":
        fwd = lambda seq: bench_mod.forward_logits_blocked(params, seq)
    else:
        fwd = lambda seq: bench_mod.forward_logits_reference(params, seq)
    report = bench_mod.measure_throughput(fwd, workload, args.window)
    payload = {
        "tokens_per_second": report.tokens_per_second,
        "window_seconds": report.window_seconds,
        "batches_measured": report.batches_measured,
        "batches_excluded": report.batches_excluded,
        "config": {**report.config, "path": args.path, "text_tokens": args.text_tokens},
    }
    print(json.dumps(payload))
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    return 0


_COMMANDS = {
    "count-tokens": _cmd_count_tokens,
    "patchify": _cmd_patchify,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    json_errors = "--json-errors" in (argv if argv is not None else sys.argv[1:])

    def fail(exc, code):
        if json_errors:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        else:
            print(f"patchlm: error: {exc}", file=sys.stderr)
        return code

    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        return fail(exc, 1)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper())
    try:
        return _COMMANDS[args.command](args, _load_config_file(args.config))
    except (ContractError, ConfigError) as exc:
        return fail(exc, 1)
    except (DataError, OSError) as exc:
        return fail(exc, 2)


def entry() -> None:
    sys.exit(main())
