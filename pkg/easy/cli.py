"""Command-line entry point: ``easy <command> [options]``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .anonymizer import POOL_NAME, anonymize_directory, build_pool, load_pool, save_pool
from .config import RunConfig, config_hash, configure_logging, load_config, parse_override, with_overrides
from .errors import EasyError
from .evaluation import VARIANTS, parse_sweep, pool_speaker_ids, probe_layers, run_ablation, run_protocol
from .models import ErrorRecord
from .storage import write_json
from .synthdata import build_corpus, load_corpus, write_corpus
from .trainer import Trainer, load_model

logger = logging.getLogger(__name__)

PROBE_REPORT_NAME = "probe_report.json"
# Sections a checkpoint command may take from --config without touching the trained model.
_RUNTIME_SECTIONS = ("audio", "anon", "eval", "paths", "log_level")


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides = dict(parse_override(item) for item in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return overrides


def _fresh_config(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _checkpoint_config(args: argparse.Namespace, base: RunConfig) -> RunConfig:
    """Checkpoint config, then runtime sections of --config, then --seed/--set."""
    overrides: dict[str, Any] = {}
    if args.config:
        file_cfg = load_config(args.config)
        dumped = file_cfg.model_dump(mode="json")
        overrides.update({key: dumped[key] for key in _RUNTIME_SECTIONS})
    overrides.update(_overrides(args))
    return with_overrides(base, overrides) if overrides else base


def _emit(payload: Any):
    if hasattr(payload, "model_dump_json"):
        print(payload.model_dump_json())
    else:
        print(json.dumps(payload, sort_keys=True))


def cmd_synth_data(args: argparse.Namespace) -> int:
    cfg = _fresh_config(args)
    configure_logging(cfg.log_level)
    out = Path(args.out or cfg.paths.corpus_dir)
    corpus = build_corpus(cfg, cfg.seed)
    manifest = write_corpus(corpus, out)
    _emit({"manifest": str(manifest), "utterances": len(corpus.utterances()), "config_hash": corpus.config_hash})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _fresh_config(args)
    if args.steps is not None:
        cfg = with_overrides(cfg, {"optim.steps": args.steps})
    configure_logging(cfg.log_level)
    out = Path(args.out or cfg.paths.run_dir)
    corpus = load_corpus(args.corpus or cfg.paths.corpus_dir, cfg)
    trainer = Trainer(cfg, corpus, out)
    if args.resume:
        trainer.resume(args.resume)
    # a resumed run stops at optim.steps in total
    result = trainer.fit(max(0, cfg.optim.steps - trainer.step))

    speakers = pool_speaker_ids(corpus, cfg)
    pool = build_pool(corpus.train, trainer.model, speakers, pool_min=cfg.anon.pool_min)
    pool.config_hash, pool.seed, pool.model_step = trainer.hash, cfg.seed, trainer.step
    save_pool(pool, out / POOL_NAME)
    _emit(
        {
            "checkpoint": str(result.checkpoint),
            "pool": str(out / POOL_NAME),
            "steps": result.steps,
            "rejected": result.rejected,
            "first_rec": result.first_rec,
            "last_rec": result.last_rec,
            "config_hash": trainer.hash,
        }
    )
    return 0


def cmd_anonymize(args: argparse.Namespace) -> int:
    loaded = load_model(args.checkpoint)
    cfg = _checkpoint_config(args, loaded.cfg)
    flags = {
        "anon.alpha": args.alpha,
        "anon.num_averaged": args.num_averaged,
        "anon.seed": args.anon_seed,
        "anon.per_speaker": True if args.per_speaker else None,
        "anon.bypass": True if args.bypass else None,
    }
    flags = {key: value for key, value in flags.items() if value is not None}
    if flags:
        cfg = with_overrides(cfg, flags)
    configure_logging(cfg.log_level)
    pool = load_pool(args.pool, pool_min=cfg.anon.pool_min)
    if pool.config_hash and pool.config_hash != loaded.config_hash:
        logger.warning(f"Pool {args.pool} was built by a different model ({pool.config_hash})")
    records = anonymize_directory(
        args.input,
        args.out,
        loaded.model,
        pool,
        cfg.anon,
        sample_rate=cfg.mel.sample_rate,
        audio_cfg=cfg.audio,
        config_hash=config_hash(cfg),
        run_seed=cfg.seed,
    )
    _emit({"files": len(records), "out": str(args.out), "config_hash": config_hash(cfg)})
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    loaded = load_model(args.checkpoint)
    cfg = _checkpoint_config(args, loaded.cfg)
    configure_logging(cfg.log_level)
    pool = load_pool(args.pool, pool_min=cfg.anon.pool_min)
    corpus = load_corpus(args.corpus or cfg.paths.corpus_dir, cfg)
    report = run_protocol(
        loaded.model, pool, corpus, cfg, model_step=loaded.step, out_dir=args.out
    )
    _emit(report)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _fresh_config(args)
    configure_logging(cfg.log_level)
    corpus = load_corpus(args.corpus or cfg.paths.corpus_dir, cfg)
    rows = run_ablation(cfg, corpus, args.variants, args.seeds, parse_sweep(args.sweep or []), args.out)
    for row in rows:
        _emit(row)
    return 0


def cmd_probe_layers(args: argparse.Namespace) -> int:
    loaded = load_model(args.checkpoint)
    cfg = _checkpoint_config(args, loaded.cfg)
    configure_logging(cfg.log_level)
    corpus = load_corpus(args.corpus or cfg.paths.corpus_dir, cfg)
    n = loaded.model.num_quantizers
    specs = args.layers or ["1", f"2:{n}", f"1:{n}"]
    report = probe_layers(loaded.model, corpus, specs, cfg, model_step=loaded.step)
    write_json(Path(args.out) / PROBE_REPORT_NAME, report)
    _emit(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (default: $EASY_CONFIG)")
    common.add_argument("--seed", type=int, help="run seed, overrides the config")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="config override such as optim.steps=500; repeatable"
    )

    parser = argparse.ArgumentParser(prog="easy", description="Emotion-aware speaker anonymization toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="synthesize the labelled corpus")
    p.add_argument("--out", help="corpus directory (default: paths.corpus_dir)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train a model and build its speaker pool")
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--out", help="run directory (default: paths.run_dir)")
    p.add_argument("--steps", type=int, help="training steps, overrides optim.steps")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("anonymize", parents=[common], help="anonymize a directory of WAV files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--in", dest="input", required=True, help="input directory of WAV files")
    p.add_argument("--out", required=True, help="output directory, mirrors the input tree")
    p.add_argument("--alpha", type=float, help="weight of the pool average, in [0, 1]")
    p.add_argument("--num-averaged", type=int, help="pool identities averaged per pseudo-speaker")
    p.add_argument("--anon-seed", type=int, help="pseudo-speaker seed, overrides anon.seed")
    p.add_argument("--per-speaker", action="store_true", help="one pseudo-speaker per source speaker")
    p.add_argument("--bypass", action="store_true", help="keep the original speaker vector")
    p.set_defaults(func=cmd_anonymize)

    p = sub.add_parser("evaluate", parents=[common], help="privacy/utility protocol on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--out", required=True, help="directory for metrics.json and trials.jsonl")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate loss ablations")
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--out", required=True, help="directory for per-run reports and ablation.jsonl")
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1])
    p.add_argument(
        "--sweep", action="append", metavar="KEY=V1,V2", help="sweep alpha, m, lambda_grl or K; repeatable"
    )
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe-layers", parents=[common], help="linear probes per VQ layer subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument(
        "--layers", action="append", metavar="SPEC", help="layer subset such as 1, 2:8 or 1,3; repeatable"
    )
    p.add_argument("--out", required=True, help="directory for probe_report.json")
    p.set_defaults(func=cmd_probe_layers)
    return parser


def _fail(command: str, e: BaseException, code: int) -> int:
    record = ErrorRecord(command=command, error=type(e).__name__, message=str(e))
    print(record.model_dump_json(), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EasyError as e:
        logger.error(f"{args.command} failed: {e}")
        return _fail(args.command, e, 2)
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        return _fail(args.command, e, 1)
