"""Command-line entry point: prepare-data, train, eval-asr, infer, bench.

Configuration is a plain ``key=value`` file (``#`` starts a comment) plus
repeatable ``--set key=value`` overrides. Every report line is JSON.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .audio import write_wav
from .corpus import SyntheticCorpusSpec, load_manifest, prepare_data
from .errors import ConfigError, DataError, OmniError
from .metrics import score_transcripts
from .model import OmniModel
from .runtime import TurnInput, bench_latency, load_model, run_turn
from .training import STAGE_ORDER, StageData, build_stage_plan, checkpoint_path, run_stage, transcribe

# key -> (type, default, help)
SCHEMA = {
    "data_dir": (str, "data", "corpus directory written by prepare-data"),
    "out_dir": (str, "runs", "checkpoints, metrics and reports"),
    "seed": (int, 0, "model-initialisation and sampling seed"),
    "stage": (str, "", "stage id, or 'all' for the whole chain"),
    "steps": (int, None, "optimizer steps (stage default if unset)"),
    "lr": (float, None, "learning rate (stage default if unset)"),
    "optimizer": (str, None, "sgd or adam (stage default if unset)"),
    "batch_size": (int, None, "records per step (stage default if unset)"),
    "stop_loss": (float, None, "early stop once the step loss drops below this"),
    "checkpoint": (str, "", "checkpoint for eval-asr / infer / bench"),
    "split": (str, "asr_heldout", "manifest evaluated by eval-asr"),
    "image": (str, "", "PPM image for infer / bench"),
    "video": (str, "", "video directory for infer / bench"),
    "audio": (str, "", "WAV query for infer / bench"),
    "text": (str, "", "text query for infer / bench"),
    "mode": (str, "sequential", "runtime mode: sequential or pipelined"),
    "max_new": (int, 32, "maximum reply tokens"),
    "repetitions": (int, 3, "bench repetitions per input"),
    "queue_capacity": (int, 8, "pipelined-mode queue capacity"),
}
SCHEMA.update({f.name: (int, f.default, "synthetic corpus size/seed") for f in fields(SyntheticCorpusSpec)
               if f.name != "seed"})


def parse_kv(text: str, where: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def resolve_config(config_path: str | None, overrides: list[str], **flags) -> dict:
    raw: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = parse_kv(line, f"{path}:{n}")
                raw[k] = v
    for item in overrides:
        k, v = parse_kv(item, "--set")
        raw[k] = v
    for k, v in flags.items():
        if v is not None:
            raw[k] = str(v)
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(SCHEMA))}")
    cfg = {}
    for key, (typ, default, _) in SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = typ(raw[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: cannot parse {raw[key]!r} as {typ.__name__}") from exc
        else:
            cfg[key] = default
    return cfg


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True, default=str), flush=True)


# ---------------------------------------------------------------- commands

def cmd_prepare_data(cfg: dict) -> None:
    spec = SyntheticCorpusSpec(**{f.name: cfg[f.name] for f in fields(SyntheticCorpusSpec)})
    paths = prepare_data(spec, cfg["data_dir"])
    counts = {name: len(load_manifest(p, check_files=False)) for name, p in paths.items()}
    emit({"command": "prepare-data", "data_dir": cfg["data_dir"], "records": counts, "config": cfg})


def cmd_train(cfg: dict) -> None:
    stage = cfg["stage"]
    if not stage:
        raise ConfigError(f"train needs --stage; valid: {', '.join(STAGE_ORDER)}, all")
    stages = STAGE_ORDER if stage == "all" else (stage,)
    model = OmniModel(seed=cfg["seed"])
    data = StageData(cfg["data_dir"])
    for sid in stages:
        spec = build_stage_plan(sid, seed=cfg["seed"], steps=cfg["steps"], lr=cfg["lr"],
                                optimizer=cfg["optimizer"], batch_size=cfg["batch_size"],
                                stop_loss=cfg["stop_loss"])
        result = run_stage(spec, model, data, cfg["out_dir"])
        emit({"command": "train", **result.to_dict(), "config": cfg})
        if not result.freeze.passed:
            raise OmniError(f"stage {sid} changed frozen parameters: {result.freeze.violations[:5]}")


def _checkpoint(cfg: dict, fallback: str) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else checkpoint_path(cfg["out_dir"], fallback)


def cmd_eval_asr(cfg: dict) -> None:
    path = _checkpoint(cfg, "2.1a")
    model = OmniModel(seed=cfg["seed"])
    stage_index = model.load(path)
    if 0 <= stage_index < STAGE_ORDER.index("2.1a"):
        raise ConfigError(f"{path} was written by stage {STAGE_ORDER[stage_index]}; eval-asr needs stage 2.1a or later")
    data = StageData(cfg["data_dir"])
    triples = []
    for rec in data.manifest(cfg["split"]):
        ref = rec.get("transcript", "")
        hyp = transcribe(model, data.mel(rec["paths"]["audio"])) if ref else ""
        triples.append((rec["id"], ref, hyp))
        emit({"id": rec["id"], "ref": ref, "hyp": hyp, "excluded": not ref})
    report = score_transcripts(triples)
    emit({"command": "eval-asr", "checkpoint": str(path), **report.to_dict(), "config": cfg})


def _turn(cfg: dict) -> TurnInput:
    return TurnInput(image_paths=(cfg["image"],) if cfg["image"] else (),
                     video_dir=cfg["video"] or None, audio_path=cfg["audio"] or None,
                     text=cfg["text"] or None)


def cmd_infer(cfg: dict) -> None:
    model = load_model(_checkpoint(cfg, "3.2"), seed=cfg["seed"])
    out = run_turn(model, _turn(cfg), cfg["mode"], cfg["max_new"], cfg["queue_capacity"])
    wav = Path(cfg["out_dir"]) / "reply.wav"
    wav.parent.mkdir(parents=True, exist_ok=True)
    write_wav(wav, out.waveform)
    emit({"command": "infer", "text": out.text, "text_ids": out.text_ids, "speech_ids": out.speech_ids,
          "samples": len(out.waveform), "waveform": str(wav), "latency": out.report.to_dict(), "config": cfg})


def cmd_bench(cfg: dict) -> None:
    model = load_model(_checkpoint(cfg, "3.2"), seed=cfg["seed"])
    report = bench_latency(model, [_turn(cfg)], cfg["repetitions"], cfg["mode"], cfg["max_new"])
    emit({"command": "bench", **report, "config": cfg})


COMMANDS = {"prepare-data": cmd_prepare_data, "train": cmd_train, "eval-asr": cmd_eval_asr,
            "infer": cmd_infer, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnistage", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--stage")
    parser.add_argument("--out", help="output directory (out_dir for train/infer, data_dir for prepare-data)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_key = "data_dir" if args.command == "prepare-data" else "out_dir"
    try:
        cfg = resolve_config(args.config, args.overrides, seed=args.seed, stage=args.stage,
                             **{out_key: args.out})
        COMMANDS[args.command](cfg)
    except OmniError as exc:
        emit({"command": args.command, "error": type(exc).__name__, "message": str(exc)})
        return exc.exit_code
    except OSError as exc:
        emit({"command": args.command, "error": "DataError", "message": str(exc)})
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
