"""Configuration files, metrics CSVs, plots, the variant comparison and the CLI."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .environment import (Environment, KnowledgeBase, Prompt, Vocabulary, generate_kb, load_kb, load_prompts,
                          save_kb, save_prompts, split_prompts)
from .objectives import AlgorithmVariant
from .policy import PolicyParams, load_checkpoint, save_checkpoint
from .trainer import StepReport, TrainConfig, TrainingError, evaluate, initial_policy, train

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "mean_reward", "objective", "grad_norm", "groups_sampled", "groups_accepted",
              "eval_reward", "wall_ms")
KB_FILE, PROMPTS_FILE, VOCAB_FILE = "kb.tsv", "prompts.tsv", "vocab.txt"


class ConfigError(ValueError):
    pass


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    """Toy environment generation and the held-out split."""

    seed: int = 0
    entities: int = 30
    relations: int = 8
    hops_mix: float = 0.5
    facts_per_entity: int = 3
    prompts: int = 140
    filler: int = 16
    top_k: int = 1
    heldout_fraction: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)


def _leaf_keys(cls, prefix: str = "") -> dict[str, type]:
    """Dotted key -> annotated type for every scalar field reachable from ``cls``."""
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        t = hints[f.name]
        if dataclasses.is_dataclass(t):
            out.update(_leaf_keys(t, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = t
    return out


def _train_keys() -> dict[str, type]:
    keys = _leaf_keys(TrainConfig)
    keys.pop("objective.std_mode")
    return keys


def _coerce(text: str, t):
    text = text.strip()
    if typing.get_origin(t) is typing.Union:
        args = [a for a in typing.get_args(t) if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        return _coerce(text, args[0])
    if t is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if t is AlgorithmVariant:
        return AlgorithmVariant.parse(text)
    return t(text)


def _replace_nested(obj, dotted: dict[str, object]):
    changes, nested = {}, {}
    for key, value in dotted.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            changes[head] = value
    for head, sub in nested.items():
        changes[head] = _replace_nested(getattr(obj, head), sub)
    return dataclasses.replace(obj, **changes)


def parse_config(text: str, base: Optional[dict[str, str]] = None) -> RunConfig:
    """Parse flat ``key=value`` lines (``#`` comments allowed) into a :class:`RunConfig`.

    Training keys are unprefixed (``lr``, ``objective.clip_epsilon``,
    ``rollout.group_size``); environment keys start with ``env.``.  Unknown
    keys, duplicate keys and unparsable values raise :class:`ConfigError`.
    When ``objective.clip_epsilon`` is absent it takes the variant default.
    """
    raw: dict[str, str] = dict(base or {})
    seen = set()
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        seen.add(key)
        raw[key] = value
    return build_config(raw)


def build_config(raw: dict[str, str]) -> RunConfig:
    train_keys = _train_keys()
    env_keys = _leaf_keys(EnvConfig)
    train_vals, env_vals = {}, {}
    for key, value in raw.items():
        try:
            if key.startswith("env."):
                name = key[4:]
                if name not in env_keys:
                    raise ConfigError(f"unknown config key {key!r}")
                env_vals[name] = _coerce(value, env_keys[name])
            elif key in train_keys:
                train_vals[key] = _coerce(value, train_keys[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    try:
        return RunConfig(_replace_nested(TrainConfig(), train_vals), EnvConfig(**env_vals))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: Optional[dict[str, str]] = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def dump_config(cfg: RunConfig) -> str:
    """Every key with its value, in the format :func:`parse_config` reads."""
    lines = []
    for key in _train_keys():
        value = cfg.train
        for part in key.split("."):
            value = getattr(value, part)
        lines.append(f"{key}={_format_value(value)}")
    for key in _leaf_keys(EnvConfig):
        lines.append(f"env.{key}={_format_value(getattr(cfg.env, key))}")
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, AlgorithmVariant):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# --- environment files -------------------------------------------------------


def build_environment(env: EnvConfig) -> tuple[Vocabulary, KnowledgeBase, list[Prompt]]:
    return generate_kb(env.seed, env.entities, env.relations, env.hops_mix,
                       facts_per_entity=env.facts_per_entity, n_prompts=env.prompts,
                       top_k=env.top_k, n_filler=env.filler)


def write_environment(directory, vocab: Vocabulary, kb: KnowledgeBase, prompts: Sequence[Prompt]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    vocab.save(d / VOCAB_FILE)
    save_kb(kb, vocab, d / KB_FILE)
    save_prompts(prompts, vocab, d / PROMPTS_FILE)


def read_environment(directory, top_k: int = 1) -> tuple[Vocabulary, KnowledgeBase, list[Prompt]]:
    d = Path(directory)
    vocab = Vocabulary.load(d / VOCAB_FILE)
    return vocab, load_kb(d / KB_FILE, vocab, top_k), load_prompts(d / PROMPTS_FILE, vocab)


# --- metrics -----------------------------------------------------------------


def _fixed(x: float, digits: int) -> str:
    s = f"{x:.{digits}f}"
    return s[1:] if s.startswith("-") and float(s) == 0 else s  # no "-0.000"


def report_row(r: StepReport) -> list[str]:
    return [
        str(r.step),
        f"{r.mean_reward:.6f}",
        _fixed(r.objective, 8),
        f"{r.grad_norm:.8f}",
        str(r.stats.groups_sampled),
        str(r.stats.groups_accepted),
        "" if r.eval_reward is None else f"{r.eval_reward:.6f}",
        "" if r.wall_ms is None else f"{r.wall_ms:.3f}",
    ]


def write_metrics(reports: Sequence[StepReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(report_row(r))


def read_metrics(path) -> dict[str, np.ndarray]:
    """Columns of a metrics CSV as float arrays; empty cells become NaN."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = list(reader)
    cols = {}
    for j, name in enumerate(CSV_HEADER):
        cols[name] = np.array([float(row[j]) if row[j] != "" else np.nan for row in rows])
    return cols


def trailing_mean(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Mean of the last ``window`` values up to and including each index (shorter at the start)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(values, dtype=np.float64)
    c = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_curves(series: dict[str, dict[str, np.ndarray]], path, window: int = 10, title: str = "") -> None:
    """Overlay smoothed training reward and held-out reward for each labelled metrics table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "searchrl"
    fig, (ax_train, ax_eval) = plt.subplots(1, 2, figsize=(10, 4))
    for label, cols in series.items():
        line, = ax_train.plot(cols["step"], trailing_mean(cols["mean_reward"], window), label=label)
        ev = ~np.isnan(cols["eval_reward"])
        if ev.any():
            ax_eval.plot(cols["step"][ev], cols["eval_reward"][ev], marker="o", ms=3, color=line.get_color(),
                         label=label)
    ax_train.set_xlabel("step")
    ax_train.set_ylabel(f"train reward (moving avg, {window})")
    ax_eval.set_xlabel("step")
    ax_eval.set_ylabel("held-out reward (greedy)")
    for ax in (ax_train, ax_eval):
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    ax_train.legend(loc="lower right", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --- experiments -------------------------------------------------------------

COMPARE_UPDATE_EPOCHS = 4


@dataclass(frozen=True)
class ExperimentSpec:
    entries: tuple[tuple[str, TrainConfig], ...]
    env: EnvConfig = field(default_factory=EnvConfig)
    smoothing_window: int = 10
    output_dir: Path = Path("compare_out")

    def __post_init__(self):
        labels = [label for label, _ in self.entries]
        if not labels:
            raise ValueError("an experiment needs at least one entry")
        if len(set(labels)) != len(labels):
            raise ValueError("experiment labels must be unique")
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")


def variant_sweep(base: TrainConfig) -> tuple[tuple[str, TrainConfig], ...]:
    """One entry per variant; an unset clip range resolves to each variant's default."""
    return tuple((v.value, dataclasses.replace(base, variant=v)) for v in AlgorithmVariant)


@dataclass
class ExperimentResult:
    reports: dict[str, list[StepReport]]
    errors: dict[str, TrainingError]
    csv_paths: dict[str, Path]
    svg_path: Path

    def final_smoothed(self, window: int = 10) -> dict[str, float]:
        return {label: float(trailing_mean([r.mean_reward for r in reps], window)[-1]) if reps else float("nan")
                for label, reps in self.reports.items()}


def run_experiment(spec: ExperimentSpec, environment=None) -> ExperimentResult:
    """Train every entry on one shared environment, write ``<label>.csv`` each and ``overlay.svg``.

    Entries that share a seed and policy settings share one warm-started
    initial policy.  A failing entry keeps the reports it produced before
    the error (they are still written) and its error is returned.
    """
    vocab, kb, prompts = environment if environment is not None else build_environment(spec.env)
    train_p, held = split_prompts(prompts, spec.env.heldout_fraction, spec.env.seed)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    inits: dict[tuple, PolicyParams] = {}
    result = ExperimentResult({}, {}, {}, out / "overlay.svg")
    for label, cfg in spec.entries:
        env = Environment(kb, max_turns=cfg.rollout.max_turns, max_action_tokens=cfg.rollout.max_action_tokens)
        key = (cfg.seed, cfg.policy)
        if key not in inits:
            inits[key] = initial_policy(cfg, env, vocab, train_p)
        reports: list[StepReport] = []
        try:
            train(cfg, kb, vocab, train_p, held, init=inits[key], on_step=lambda r, _p: reports.append(r))
        except TrainingError as exc:
            log.warning("%s stopped: %s", label, exc)
            result.errors[label] = exc
        result.reports[label] = reports
        path = out / f"{label}.csv"
        write_metrics(reports, path)
        result.csv_paths[label] = path
    plot_curves({label: read_metrics(p) for label, p in result.csv_paths.items()}, result.svg_path,
                spec.smoothing_window)
    return result


# --- CLI ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="searchrl", description="Group-based RL for a toy multi-turn search agent.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-env", help="write a generated knowledge base and prompt set")
    g.add_argument("--seed", type=int, default=EnvConfig.seed)
    g.add_argument("--entities", type=int, default=EnvConfig.entities)
    g.add_argument("--relations", type=int, default=EnvConfig.relations)
    g.add_argument("--hops-mix", type=float, default=EnvConfig.hops_mix)
    g.add_argument("--facts-per-entity", type=int, default=EnvConfig.facts_per_entity)
    g.add_argument("--prompts", type=int, default=EnvConfig.prompts)
    g.add_argument("--filler", type=int, default=EnvConfig.filler)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="key=value config file (defaults for missing keys)")
    t.add_argument("--env", help="directory written by gen-env (default: generate from env.* keys)")
    t.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("compare", help="train all four variants and overlay their curves")
    c.add_argument("--config", help="base key=value config file")
    c.add_argument("--seeds", type=int, nargs="+", help="training seeds (default: the config seed)")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--window", type=int, default=10, help="smoothing window")

    e = sub.add_parser("eval", help="greedy held-out reward of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True, help="directory written by gen-env (vocab and KB)")
    e.add_argument("--prompts", help="prompt file (default: the environment's prompts)")
    e.add_argument("--config", help="config file for rollout limits")

    pl = sub.add_parser("plot", help="plot metrics CSVs as SVG")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--window", type=int, default=10)
    return p


def _config_or_exit(path: Optional[str], base: Optional[dict[str, str]] = None) -> RunConfig:
    if path is None:
        return build_config(dict(base or {}))
    if not Path(path).is_file():
        raise _UsageError(f"config file not found: {path}")
    try:
        return load_config(path, base)
    except ConfigError as exc:
        raise _UsageError(f"{path}: {exc}") from exc


class _UsageError(Exception):
    pass


def _cmd_gen_env(args) -> int:
    env = EnvConfig(seed=args.seed, entities=args.entities, relations=args.relations, hops_mix=args.hops_mix,
                    facts_per_entity=args.facts_per_entity, prompts=args.prompts, filler=args.filler)
    vocab, kb, prompts = build_environment(env)
    write_environment(args.out, vocab, kb, prompts)
    print(f"wrote {len(kb.facts)} facts, {len(prompts)} prompts, V={vocab.size} to {args.out}")
    return 0


def _load_env_for(cfg: RunConfig, env_dir: Optional[str]):
    if env_dir is None:
        return build_environment(cfg.env)
    return read_environment(env_dir, cfg.env.top_k)


def _cmd_train(args) -> int:
    cfg = _config_or_exit(args.config)
    vocab, kb, prompts = _load_env_for(cfg, args.env)
    train_p, held = split_prompts(prompts, cfg.env.heldout_fraction, cfg.env.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg))
    reports: list[StepReport] = []

    def on_step(r: StepReport, params: PolicyParams):
        reports.append(r)
        if (r.step + 1) % cfg.train.eval_every == 0:
            save_checkpoint(params, out / "checkpoint.txt")

    try:
        params, _ = train(cfg.train, kb, vocab, train_p, held, on_step=on_step)
    except TrainingError as exc:
        write_metrics(reports, out / "metrics.csv")
        print(f"error: {exc.error_name}: {exc}", file=sys.stderr)
        return 1
    write_metrics(reports, out / "metrics.csv")
    save_checkpoint(params, out / "checkpoint.txt")
    print(f"{cfg.train.variant.value}: {len(reports)} steps, "
          f"smoothed train reward {trailing_mean([r.mean_reward for r in reports])[-1]:.3f}")
    if held:
        print(f"held-out reward {evaluate(params, held, kb, cfg.train.rollout):.3f}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _config_or_exit(args.config, {"update_epochs": str(COMPARE_UPDATE_EPOCHS)})
    seeds = args.seeds or [cfg.train.seed]
    environment = build_environment(cfg.env)
    out = Path(args.out)
    summary = []
    failed = False
    for seed in seeds:
        base = dataclasses.replace(cfg.train, seed=seed)
        directory = out if len(seeds) == 1 else out / f"seed{seed}"
        spec = ExperimentSpec(variant_sweep(base), cfg.env, args.window, directory)
        result = run_experiment(spec, environment)
        for label, value in result.final_smoothed(args.window).items():
            err = result.errors.get(label)
            summary.append((seed, label, value, "" if err is None else err.error_name))
            print(f"seed {seed} {label}: final smoothed reward {value:.3f}"
                  + ("" if err is None else f" (stopped: {err.error_name})"))
        failed = failed or bool(result.errors)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "variant", "final_smoothed_reward", "error"))
        for seed, label, value, err in summary:
            w.writerow((seed, label, f"{value:.6f}", err))
    if failed:
        print("error: one or more variants stopped early", file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args) -> int:
    cfg = _config_or_exit(args.config)
    vocab, kb, prompts = read_environment(args.env, cfg.env.top_k)
    if args.prompts:
        prompts = load_prompts(args.prompts, vocab)
    params = load_checkpoint(args.checkpoint)
    if params.vocab_size != vocab.size:
        raise _UsageError(f"checkpoint vocabulary {params.vocab_size} != environment vocabulary {vocab.size}")
    print(f"{evaluate(params, prompts, kb, cfg.train.rollout):.6f}")
    return 0


def _cmd_plot(args) -> int:
    series = {Path(p).stem: read_metrics(p) for p in args.csv}
    plot_curves(series, args.out, args.window)
    return 0


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"gen-env": _cmd_gen_env, "train": _cmd_train, "compare": _cmd_compare,
                "eval": _cmd_eval, "plot": _cmd_plot}
    try:
        return handlers[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"searchrl: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(cli_main())
