"""``quartznet`` command line: profile, train, eval, transcribe.

Exit codes: 0 ok, 1 some inputs failed (transcribe), 2 config/usage error,
3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import model as model_mod
from .errors import ConfigError, DataError, FormatError, NumericError, QuartzNetError
from .decode import BeamConfig
from .frontend import load_wav, log_mel, read_manifest
from .lm import load_arpa
from .model import ModelConfig, count_params, load_checkpoint, resolve_config_path, tcs_module_count, tds_param_count
from .training import DecoderConfig, TrainRunConfig, evaluate, train, transcribe_features

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("quartznet")


# ---------------------------------------------------------------------------
# Config documents and overrides
# ---------------------------------------------------------------------------


def load_document(path: str) -> dict:
    p = resolve_config_path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    defaults = TrainRunConfig().to_dict()
    doc["training"] = {**defaults, **doc.get("training", {})}
    return doc


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _check_type(key: str, old, new):
    if old is None or new is None:
        return new
    if isinstance(old, bool):
        if not isinstance(new, bool):
            raise ConfigError(f"override {key}: expected true/false, got {new!r}")
        return new
    if isinstance(old, int):
        if isinstance(new, bool) or not isinstance(new, (int, float)) or float(new) != int(new):
            raise ConfigError(f"override {key}: expected an integer, got {new!r}")
        return int(new)
    if isinstance(old, float):
        if isinstance(new, bool) or not isinstance(new, (int, float)):
            raise ConfigError(f"override {key}: expected a number, got {new!r}")
        return float(new)
    if type(old) is not type(new):
        raise ConfigError(f"override {key}: expected {type(old).__name__}, got {type(new).__name__}")
    return new


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; unknown keys and type mismatches are errors."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            node = _child(node, part, key)
        last = parts[-1]
        if isinstance(node, list):
            idx = _index(node, last, key)
            node[idx] = _check_type(key, node[idx], _parse_value(raw))
        elif isinstance(node, dict) and last in node:
            node[last] = _check_type(key, node[last], _parse_value(raw))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return doc


def _index(node: list, part: str, key: str) -> int:
    try:
        idx = int(part)
        node[idx]
    except (ValueError, IndexError):
        raise ConfigError(f"unknown config key {key!r}") from None
    return idx


def _child(node, part: str, key: str):
    if isinstance(node, dict) and part in node:
        return node[part]
    if isinstance(node, list):
        return node[_index(node, part, key)]
    raise ConfigError(f"unknown config key {key!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _parse_tds(text: str) -> tuple[int, int, int]:
    try:
        k, w, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("--compare-tds expects k,w,c") from None
    return k, w, c


def cmd_profile(args) -> int:
    reports = []
    for path in args.configs:
        cfg = ModelConfig.from_dict(load_document(path))
        reports.append(count_params(cfg))
    payload = {"models": [r.to_dict() for r in reports]}
    if args.compare_tds:
        k, w, c = args.compare_tds
        payload["tds_comparison"] = {
            "k": k,
            "w": w,
            "c": c,
            "tds_block": tds_param_count(k, w, c),
            "separable_module": tcs_module_count(k, c),
        }
    if args.json:
        Path(args.json).write_text(json.dumps(payload, indent=2) + "\n")
    if args.format == "json":
        print(json.dumps(payload, indent=2))
        return EXIT_OK
    for r in reports:
        if args.layers:
            print(f"{'layer':<24} {'kind':<9} {'K':>3} {'c_in':>5} {'c_out':>5} {'g':>2} {'params':>10}")
            for l in r.layers:
                print(f"{l.name:<24} {l.kind:<9} {l.kernel_size:>3} {l.c_in:>5} {l.c_out:>5} {l.groups:>2} {l.params:>10,}")
        print(f"{r.name}: {r.total:,} params ({r.millions:.1f}M)")
    if args.compare_tds:
        t = payload["tds_comparison"]
        print(f"k={k} w={w} c={c}: TDS block {t['tds_block']:,} vs separable module {t['separable_module']:,}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_document(args.config)
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"training.seed={args.seed}")
    doc = apply_overrides(doc, overrides)
    cfg = ModelConfig.from_dict(doc)
    run = TrainRunConfig.from_dict(doc["training"])
    if args.init_checkpoint:
        run.init_checkpoint = args.init_checkpoint
    if args.reinit_head:
        run.reinit_head = True
    if not Path(args.manifest).exists():
        raise DataError(f"manifest not found: {args.manifest}")
    data = read_manifest(args.manifest)
    if run.init_checkpoint:
        model = load_checkpoint(run.init_checkpoint, cfg, reinit_head=run.reinit_head, seed=run.seed)
    else:
        model = model_mod.build(cfg, seed=run.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(doc, indent=2) + "\n")
    result = train(model, run, data, log_path=out / "train_log.jsonl", checkpoint_dir=out, resume_from=args.resume)
    last = result.log[-1] if result.log else None
    summary = {"steps": result.steps, "skipped": result.skipped, "final_loss": last["loss"] if last else None, "checkpoints": result.checkpoints}
    print(json.dumps(summary))
    return EXIT_OK


def _decoder_from_args(args) -> DecoderConfig:
    lm = load_arpa(args.lm) if args.lm else None
    use_beam = args.lm is not None or args.beam is not None
    bc = BeamConfig(beam_width=args.beam or 2048, alpha=args.alpha, beta=args.beta)
    return DecoderConfig("beam" if use_beam else "greedy", bc, lm)


def cmd_eval(args) -> int:
    decoder = _decoder_from_args(args)
    model = load_checkpoint(args.checkpoint)
    if not Path(args.manifest).exists():
        raise DataError(f"manifest not found: {args.manifest}")
    report = evaluate(model, read_manifest(args.manifest), decoder)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"WER {100 * report.wer:.2f}% CER {100 * report.cer:.2f}% ({len(report.utterances)} utterances)")
    return EXIT_OK


def cmd_transcribe(args) -> int:
    decoder = _decoder_from_args(args)
    model = load_checkpoint(args.checkpoint)
    status = EXIT_OK
    for path in args.wavs:
        try:
            feats = log_mel(load_wav(path), n_mels=model.cfg.input_features).values
        except QuartzNetError as exc:
            print(f"{path}\tERROR {exc}", file=sys.stderr)
            status = EXIT_PARTIAL
            continue
        text = transcribe_features(model, [feats], decoder)[0]
        print(f"{path}\t{text}")
    return status


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _add_decoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lm", help="ARPA n-gram LM for shallow fusion")
    p.add_argument("--alpha", type=float, default=3.5, help="LM weight (default 3.5)")
    p.add_argument("--beta", type=float, default=1.5, help="word insertion bonus (default 1.5)")
    p.add_argument("--beam", type=int, default=None, help="beam width; implies beam search (default 2048 with --lm)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quartznet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="count parameters of one or more configs")
    p.add_argument("configs", nargs="+", help="config path or shipped config name")
    p.add_argument("--compare-tds", type=_parse_tds, metavar="K,W,C")
    p.add_argument("--layers", action="store_true", help="print the per-layer table")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--json", help="also write the JSON report here")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("train", help="train a model on a JSON-lines manifest")
    p.add_argument("config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoints and the training log")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--init-checkpoint")
    p.add_argument("--reinit-head", action="store_true")
    p.add_argument("--resume", help="continue a run from one of its checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="WER/CER of a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", help="write per-utterance JSON report here")
    _add_decoder_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transcribe", help="transcribe WAV files")
    p.add_argument("checkpoint")
    p.add_argument("wavs", nargs="+")
    _add_decoder_flags(p)
    p.set_defaults(func=cmd_transcribe)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except QuartzNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
