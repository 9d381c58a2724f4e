"""Command-line entry point: ``epievo run | resume | inspect``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import secrets
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint
from .data import load_task
from .ecosystem import Ecosystem, EcosystemConfig, GenerationMetrics, init_ecosystem, run_generation
from .errors import CheckpointError, InputError, ParseError
from .genome import format_key, genome_key
from .model import parameter_count

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

RUN_DEFAULTS = {
    "task": "mnist",
    "data_dir": None,
    "out_dir": "runs/latest",
    "checkpoint_every": 1,
}
METRIC_FIELDS = [f.name for f in fields(GenerationMetrics)]
CHECKPOINT_NAME = "checkpoint.bin"

log = logging.getLogger("epievo")


class ConfigError(Exception):
    pass


# flag -> config key
FLAG_KEYS = {
    "task": "task",
    "data_dir": "data_dir",
    "out_dir": "out_dir",
    "generations": "generations",
    "initial_size": "initial_size",
    "max_size": "max_size",
    "species": "initial_species",
    "species_cap": "species_cap",
    "subset_fraction": "train_subset_fraction",
    "batch_size": "batch_size",
    "mutation_prob": "mutation_probability",
    "offspring_target": "offspring_target",
    "seed": "master_seed",
    "threads": "threads",
    "checkpoint_every": "checkpoint_every",
}


def default_config() -> dict:
    cfg = {f.name: f.default for f in fields(EcosystemConfig)}
    cfg["master_seed"] = None
    cfg.update(RUN_DEFAULTS)
    return cfg


def effective_config(args) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key in loaded:
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r} in {path}")
        cfg.update(loaded)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if args.no_speciation:
        cfg["speciation_enabled"] = False
    if cfg["master_seed"] is None:
        cfg["master_seed"] = secrets.randbits(32)
    if int(cfg["checkpoint_every"]) < 0:
        raise ConfigError("checkpoint_every: must be >= 0")
    return cfg


def ecosystem_config(cfg: dict) -> EcosystemConfig:
    kwargs = {k: cfg[k] for k in EcosystemConfig.field_names()}
    try:
        return EcosystemConfig(**kwargs)
    except InputError as exc:
        raise ConfigError(str(exc))
    except TypeError as exc:
        raise ConfigError(f"invalid config value: {exc}")


class MetricsWriter:
    """Appends one CSV row and one JSON line per generation, flushed immediately."""

    def __init__(self, out_dir: Path, fresh: bool):
        self.csv_path = out_dir / "metrics.csv"
        self.jsonl_path = out_dir / "metrics.jsonl"
        if fresh or not self.csv_path.exists():
            with open(self.csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)
            self.jsonl_path.write_text("")

    def write(self, m: GenerationMetrics) -> None:
        row = m.as_dict()
        with open(self.csv_path, "a", newline="") as fh:
            csv.writer(fh).writerow(["" if row[k] is None else repr(row[k]) for k in METRIC_FIELDS])
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps(row) + "\n")


def summary_line(m: GenerationMetrics) -> str:
    off = "-" if m.average_offspring_fitness_before_bp is None else f"{m.average_offspring_fitness_before_bp:.4f}"
    return (
        f"gen {m.generation:4d}  highest {m.highest_fitness:.4f}  average {m.average_fitness:.4f}"
        f"  offspring-pre-BP {off}  species {m.species_count}"
    )


def _loop(eco: Ecosystem, train, test, out_dir: Path, every: int, writer: MetricsWriter) -> None:
    ckpt = out_dir / CHECKPOINT_NAME
    while eco.generation < eco.config.generations:
        m = run_generation(eco, train, test)
        writer.write(m)
        print(summary_line(m), flush=True)
        if every and eco.generation % every == 0 and eco.generation < eco.config.generations:
            checkpoint.save(eco, ckpt)
    checkpoint.save(eco, ckpt)


def cmd_run(args) -> int:
    if args.resume:
        return cmd_resume(argparse.Namespace(checkpoint=args.resume, generations=args.generations,
                                             threads=args.threads))
    try:
        cfg = effective_config(args)
        eco_cfg = ecosystem_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        train, test = load_task(cfg["task"], cfg["data_dir"], eco_cfg.master_seed)
    except (OSError, ParseError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    try:
        eco = init_ecosystem(eco_cfg, train.input_shape, train.num_classes)
        eco.meta = {"task": cfg["task"], "data_dir": cfg["data_dir"], "checkpoint_every": cfg["checkpoint_every"]}
        _loop(eco, train, test, out_dir, int(cfg["checkpoint_every"]), MetricsWriter(out_dir, fresh=True))
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_resume(args) -> int:
    path = Path(args.checkpoint)
    try:
        eco = checkpoint.load(path)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.generations is not None:
        eco.config.generations = args.generations
    if getattr(args, "threads", None):
        eco.config.threads = args.threads
    if eco.generation >= eco.config.generations:
        print(f"nothing to do: generation {eco.generation} of {eco.config.generations} already reached")
        return EXIT_OK
    try:
        train, test = load_task(eco.meta.get("task", "mnist"), eco.meta.get("data_dir"), eco.config.master_seed)
    except (OSError, ParseError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out_dir = path.parent
    try:
        _loop(eco, train, test, out_dir, int(eco.meta.get("checkpoint_every", 1)), MetricsWriter(out_dir, fresh=False))
    except Exception as exc:  # noqa: BLE001
        log.exception("resume failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def inspect_text(eco: Ecosystem) -> str:
    lines = [
        f"generation {eco.generation} of {eco.config.generations}; {len(eco.networks)} networks; "
        f"best fitness so far {eco.best_fitness:.4f}",
    ]
    if eco.config.speciation_enabled:
        lines.append("species:")
        for sp in eco.species.values():
            lines.append(f"  {sp.id:4d}  {format_key(sp.genome_key)}  members={len(sp.members)}  champion={sp.champion}")
    lines.append("networks:")
    lines.append("    id  species  age  fitness  params  genome")
    for n in eco.networks:
        sid = "-" if n.species_id is None else str(n.species_id)
        lines.append(
            f"  {n.id:4d}  {sid:>7}  {n.age:3d}  {n.absolute_fitness:.4f}  {parameter_count(n):6d}  "
            f"{format_key(genome_key(n))}"
        )
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    try:
        eco = checkpoint.load(args.checkpoint)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(inspect_text(eco))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epievo", description="Epigenetic neuroevolution of conv/FC classifiers.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="start a new evolutionary run")
    run.add_argument("--config", help="JSON file with run options")
    run.add_argument("--task", help="mnist | fashion-mnist | cifar10 | synthetic:<two-blobs|bars|xor-patches>")
    run.add_argument("--data-dir")
    run.add_argument("--out-dir")
    run.add_argument("--generations", type=int)
    run.add_argument("--initial-size", type=int)
    run.add_argument("--max-size", type=int)
    run.add_argument("--species", type=int, help="initial number of species")
    run.add_argument("--species-cap", type=int)
    run.add_argument("--no-speciation", action="store_true")
    run.add_argument("--subset-fraction", type=float)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--mutation-prob", type=float)
    run.add_argument("--offspring-target", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--threads", type=int)
    run.add_argument("--checkpoint-every", type=int)
    run.add_argument("--resume", help="continue from this checkpoint instead of starting fresh")
    run.set_defaults(func=cmd_run)

    res = sub.add_parser("resume", help="continue a run from its checkpoint")
    res.add_argument("checkpoint")
    res.add_argument("--generations", type=int, help="new total generation count")
    res.add_argument("--threads", type=int)
    res.set_defaults(func=cmd_resume)

    ins = sub.add_parser("inspect", help="summarise a checkpoint")
    ins.add_argument("checkpoint")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
