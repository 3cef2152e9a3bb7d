"""Command-line entry point.

    toys2st build-data | pack | train | infer | eval | stats

Every command reads one YAML config (``--config``), applies ``--set key=value``
overrides and dedicated flags on top, and writes under ``run_dir``. The resolved
config is echoed into each output directory and ``run_dir/manifest.json`` lists
the sha256 of every artifact.

Exit codes: 0 success, 1 validation failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, dump_config, load_config
from .errors import CheckpointError, ConfigError, InputError, ScheduleError, ToyS2STError
from .evaluation import Emission, GoldModel, LMEmitter, decode_emission, evaluate, run_emitter, score_emissions, validate_report
from .packing import pack, write_shards
from .pipeline import (
    GENERAL_STAGES,
    HQ_STAGES,
    PipelineStats,
    build_general,
    build_hq,
    clean_source,
    file_digest,
    read_discards,
    read_jsonl,
    read_samples,
    read_sources,
    write_jsonl,
)
from .corpus import generate_mt_pairs, generate_sources, phase_datasets
from .protocol import TaskMode
from .toylm.model import ToyLM
from .toylm.train import load_checkpoint, model_from_checkpoint, save_checkpoint
from .toylm.optim import AdamWState
from .workflow import build_test_set, direct_only_schedule, train_model

log = logging.getLogger("toys2st")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(ToyS2STError):
    pass


# run directory helpers --------------------------------------------------------


def _echo_config(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.yaml").write_text(dump_config(cfg))


def _update_manifest(run_dir: Path) -> None:
    entries = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            entries[path.relative_to(run_dir).as_posix()] = file_digest(path)
    (run_dir / "manifest.json").write_text(json.dumps({"version": __version__, "artifacts": entries}, indent=2, sort_keys=True) + "\n")


def _write_variant(directory: Path, result, stages, cfg: RunConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_jsonl(directory / "manifest.jsonl", result.samples)
    write_jsonl(directory / "discards.jsonl", result.discards)
    write_jsonl(directory / "audit.jsonl", _audit_rows(result))
    _write_stats(directory, result.stats)
    _echo_config(cfg, directory)


def _audit_rows(result) -> list[dict]:
    rows = [{"id": s.id, "kept": True, "trail": [[a.stage, a.decision, a.value] for a in s.audit]} for s in result.samples]
    rows += [{"id": d.id, "kept": False, "trail": [[a.stage, a.decision, a.value] for a in d.audit]} for d in result.discards]
    return sorted(rows, key=lambda r: r["id"])


def _write_stats(directory: Path, stats: PipelineStats) -> None:
    (directory / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    (directory / "ratio_histogram.csv").write_text(stats.histogram_csv("ratio"))
    (directory / "duration_histogram.csv").write_text(stats.histogram_csv("duration"))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"{what} not found at {path}; run the producing command first")
    return path


# commands -----------------------------------------------------------------------


def cmd_build_data(cfg: RunConfig, args) -> int:
    codec = cfg.build_codec()
    run = Path(cfg.run_dir)
    data = run / "data"
    data.mkdir(parents=True, exist_ok=True)
    (data / "codec.json").write_text(codec.to_json() + "\n")
    if args.variant in ("all", "general"):
        if args.sources:
            sources = read_sources(args.sources)
        else:
            sources = generate_sources(codec, cfg.corpus, cfg.seed)
        oracles = cfg.oracles.build(codec, cfg.seed)
        write_jsonl(data / "sources.jsonl", sources)
        clean, _ = clean_source(sources, oracles.source_asr, cfg.pipeline)
        write_jsonl(data / "clean_sources.jsonl", clean)
        general = build_general(sources, codec, oracles, cfg.pipeline)
        _write_variant(data / "general", general, GENERAL_STAGES, cfg)
        test_sources = generate_sources(codec, cfg.corpus, cfg.seed, split="test", exclude=[r.transcript for r in sources])
        write_jsonl(data / "test_sources.jsonl", test_sources)
        mt = generate_mt_pairs(codec, cfg.corpus, cfg.seed, exclude=[r.transcript for r in sources + test_sources])
        write_jsonl(data / "mt_pairs.jsonl", mt)
        test = build_test_set(test_sources, codec, cfg)
        write_jsonl(data / "test" / "manifest.jsonl", test)
        _echo_config(cfg, data / "test")
        general_samples = general.samples
        summary = {"sources": len(sources), "general": len(general.samples), "test": len(test)}
    else:
        path = Path(args.input) if args.input else data / "general" / "manifest.jsonl"
        general_samples = read_samples(_require(path, "general manifest"))
        summary = {"general": len(general_samples)}
    if args.variant in ("all", "hq"):
        hq = build_hq(general_samples, codec, cfg.pipeline)
        _write_variant(data / "hq", hq, HQ_STAGES, cfg)
        summary["hq"] = len(hq.samples)
    _echo_config(cfg, data)
    _update_manifest(run)
    print(json.dumps(summary))
    return EXIT_OK


def _load_datasets(cfg: RunConfig, codec, direct_only: bool = False) -> dict:
    data = Path(cfg.run_dir) / "data"
    clean = read_sources(_require(data / "clean_sources.jsonl", "clean sources"))
    general = read_samples(_require(data / "general" / "manifest.jsonl", "general manifest"))
    hq = read_samples(_require(data / "hq" / "manifest.jsonl", "hq manifest"))
    mt = read_jsonl(data / "mt_pairs.jsonl") if (data / "mt_pairs.jsonl").exists() else []
    kw = {}
    if direct_only:
        kw = {"phase2_modes": (TaskMode.S2ST_DIRECT,), "phase3_modes": (TaskMode.S2ST_DIRECT,)}
    return phase_datasets(codec, clean, general, hq, mt, **kw)


def cmd_pack(cfg: RunConfig, args) -> int:
    codec = cfg.build_codec()
    datasets = _load_datasets(cfg, codec)
    out = Path(cfg.run_dir) / "packs"
    summary = {}
    for name, examples in datasets.items():
        packs, overflow = pack(examples, cfg.packing.capacity, codec.layout.eod)
        write_shards(packs, out / name, cfg.packing.shard_size)
        used = sum(p.used for p in packs)
        summary[name] = {
            "examples": len(examples),
            "packs": len(packs),
            "overflow": len(overflow),
            "tokens": used,
            "utilization": used / (len(packs) * cfg.packing.capacity) if packs else 0.0,
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _echo_config(cfg, out)
    _update_manifest(Path(cfg.run_dir))
    print(json.dumps(summary))
    return EXIT_OK


def _phase_names(spec: str | None, cfg: RunConfig) -> list[str] | None:
    if not spec:
        return None
    known = [p.name for p in cfg.schedule.phases]
    out = []
    for part in spec.split(","):
        part = part.strip()
        name = f"phase{part}" if part.isdigit() else part
        if name not in known:
            raise UsageError(f"unknown phase {part!r}; schedule has {known}")
        out.append(name)
    return out


def _loss_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["phase", "step", "global_step", "lr", "loss", "smoothed_loss", "tokens", "n_new", "n_old"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols})
    return buf.getvalue()


def cmd_train(cfg: RunConfig, args) -> int:
    torch.manual_seed(cfg.seed)
    codec = cfg.build_codec()
    datasets = _load_datasets(cfg, codec, args.direct_only)
    schedule = direct_only_schedule(cfg.schedule) if args.direct_only else cfg.schedule
    out = Path(cfg.run_dir) / (args.output or ("train-direct" if args.direct_only else "train"))
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train_model(cfg, codec, datasets, schedule, _phase_names(args.phases, cfg), out, resume)
    final = result.selected_model()
    completed = sorted({r["phase"] for r in result.loss_rows})
    extra = {}
    if result.selected is not None:
        extra["selected"] = {k: v for k, v in result.selected.items() if k != "state_dict"}
    save_checkpoint(out / "final.ckpt", final, AdamWState(), completed, cfg.seed, result.loss_rows, extra)
    (out / "loss.csv").write_text(_loss_csv(result.loss_rows))
    (out / "audit.json").write_text(json.dumps({**result.audits, "selected": extra.get("selected")}, indent=2, sort_keys=True, default=str) + "\n")
    _echo_config(cfg, out)
    _update_manifest(Path(cfg.run_dir))
    print(json.dumps({"steps": len(result.loss_rows), "phases": completed, "selected": extra.get("selected")}))
    return EXIT_OK


def _model(cfg: RunConfig, path) -> ToyLM:
    path = Path(path) if path else Path(cfg.run_dir) / "train" / "final.ckpt"
    model = model_from_checkpoint(load_checkpoint(_require(path, "checkpoint")))
    model.eval()
    return model


def _test_samples(cfg: RunConfig, args):
    path = Path(args.input) if args.input else Path(cfg.run_dir) / "data" / "test" / "manifest.jsonl"
    samples = read_samples(_require(path, "test manifest"))
    limit = args.limit if args.limit is not None else cfg.eval.max_samples
    return samples[:limit]


def cmd_infer(cfg: RunConfig, args) -> int:
    codec = cfg.build_codec()
    mode = TaskMode.parse(args.mode or cfg.eval.mode)
    samples = _test_samples(cfg, args)
    emitter = GoldModel(codec) if args.gold else LMEmitter(_model(cfg, args.checkpoint), cfg.sampler, codec, cfg.eval.batch_size)
    emissions, seconds = run_emitter(emitter, samples, mode, codec)
    out = Path(cfg.run_dir) / "infer" / mode.value
    write_jsonl(out / "emissions.jsonl", emissions)
    _echo_config(cfg, out)
    _update_manifest(Path(cfg.run_dir))
    valid = sum(e.valid for e in emissions)
    print(json.dumps({"mode": mode.value, "emissions": len(emissions), "valid": valid, "seconds": round(seconds, 3)}))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    codec = cfg.build_codec()
    mode = TaskMode.parse(args.mode or cfg.eval.mode)
    samples = _test_samples(cfg, args)
    tolerances = tuple(args.tolerances) if args.tolerances else tuple(cfg.eval.tolerances)
    try:
        if args.emissions:
            emissions = [Emission.from_dict(d) for d in read_jsonl(_require(Path(args.emissions), "emissions"))]
            emissions = [decode_emission(s, mode, e.tokens, codec) for s, e in zip(samples, _align(samples, emissions))]
            report = score_emissions(samples, emissions, mode, None, tolerances)
        else:
            emitter = GoldModel(codec) if args.gold else LMEmitter(_model(cfg, args.checkpoint), cfg.sampler, codec, cfg.eval.batch_size)
            report = evaluate(emitter, samples, mode, codec, timing=args.timing, tolerances=tolerances)
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed emissions: {exc}") from None
    out = Path(cfg.run_dir) / "eval" / mode.value
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    (out / "rows.csv").write_text(report.rows_csv())
    _echo_config(cfg, out)
    _update_manifest(Path(cfg.run_dir))
    import jsonschema

    try:
        validate_report(doc)
    except jsonschema.ValidationError as exc:
        log.error("report fails schema validation: %s", exc.message)
        return EXIT_INVALID
    print(json.dumps(report.to_dict(rows=False)["overall"]))
    return EXIT_OK


def _align(samples, emissions):
    by_id = {e.id: e for e in emissions}
    missing = [s.id for s in samples if s.id not in by_id]
    if missing:
        raise InputError(f"no emission for {len(missing)} test samples, e.g. {missing[0]}")
    return [by_id[s.id] for s in samples]


def cmd_stats(cfg: RunConfig, args) -> int:
    directory = Path(cfg.run_dir) / "data" / args.variant
    samples = read_samples(_require(directory / "manifest.jsonl", f"{args.variant} manifest"))
    discards = read_discards(_require(directory / "discards.jsonl", f"{args.variant} discards"))
    stages = GENERAL_STAGES if args.variant == "general" else HQ_STAGES
    stats = PipelineStats.from_results(stages, samples, discards, cfg.pipeline.duration_bin)
    _write_stats(directory, stats)
    _update_manifest(Path(cfg.run_dir))
    doc = stats.to_dict()
    print(json.dumps({"stages": doc["stages"], "ratio_bins": len(doc["ratio_histogram"]), "duration_bins": len(doc["duration_histogram"])}))
    return EXIT_OK


# argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults apply to missing fields)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. model.width=64")
    common.add_argument("--run-dir", help="output root (config: run_dir)")
    common.add_argument("--seed", type=int, help="root seed (config: seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="toys2st", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-data", parents=[common], help="run the corpus pipeline")
    b.add_argument("--variant", choices=["all", "general", "hq"], default="all")
    b.add_argument("--sources", help="source record JSONL instead of the generated toy corpus")
    b.add_argument("--input", help="general manifest for --variant hq")
    b.add_argument("--workers", type=int, help="record-parallel workers (config: pipeline.workers)")
    b.set_defaults(func=cmd_build_data)

    k = sub.add_parser("pack", parents=[common], help="pack phase datasets into fixed-capacity shards")
    k.add_argument("--capacity", type=int, help="pack capacity (config: packing.capacity)")
    k.set_defaults(func=cmd_pack)

    t = sub.add_parser("train", parents=[common], help="run the phase curriculum")
    t.add_argument("--phases", help="comma-separated phases to run, e.g. 1 or 1,2")
    t.add_argument("--resume", help="phase-boundary checkpoint to continue from")
    t.add_argument("--direct-only", action="store_true", help="ablation: Direct mode only in the S2ST phases")
    t.add_argument("--output", help="subdirectory of run_dir for checkpoints (default train)")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "generate emissions"), ("eval", cmd_eval, "score a model or emissions")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--mode", help="quality | performance | direct (config: eval.mode)")
        e.add_argument("--checkpoint", help="model checkpoint (default run_dir/train/final.ckpt)")
        e.add_argument("--gold", action="store_true", help="emit gold targets instead of sampling a model")
        e.add_argument("--input", help="test manifest (default run_dir/data/test/manifest.jsonl)")
        e.add_argument("--limit", type=int, help="score at most this many samples (config: eval.max_samples)")
        if name == "eval":
            e.add_argument("--emissions", help="score an emissions JSONL written by infer")
            e.add_argument("--timing", action="store_true", help="include a wall-clock timing section")
            e.add_argument("--tolerances", type=float, nargs="+", help="SLC tolerances (config: eval.tolerances)")
        e.set_defaults(func=func)

    s = sub.add_parser("stats", parents=[common], help="recompute stage counts and histogram CSVs")
    s.add_argument("--variant", choices=["general", "hq"], default="general")
    s.set_defaults(func=cmd_stats)
    return p


def _flag_overrides(args) -> list[str]:
    out = list(args.overrides)
    if args.run_dir is not None:
        out.append(f"run_dir={json.dumps(args.run_dir)}")
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        out.append(f"pipeline.workers={args.workers}")
    if getattr(args, "capacity", None) is not None:
        out.append(f"packing.capacity={args.capacity}")
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _flag_overrides(args))
        return args.func(cfg, args)
    except (ConfigError, InputError, ScheduleError, CheckpointError, UsageError, OSError, json.JSONDecodeError) as exc:
        print(f"toys2st: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ToyS2STError, ValueError) as exc:
        print(f"toys2st: validation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
