"""Command-line experiment runner: ``train``, ``verify`` and ``sweep``."""
from __future__ import annotations

import argparse
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .core import OBJECTIVE_KINDS, SizeLimitError
from .trainer import CSV_HEADER, ConfigDomainError, MetricsRow, NonFiniteLossError, TrainConfig, train

CONFIG_KEYS = (
    "model", "num_states", "dim", "steps", "alpha_min", "objective", "potential", "beta", "clip_eps",
    "kl_old_coeff", "group_size", "rollouts_per_epoch", "updates_per_epoch", "epochs", "lr_theta",
    "lr_phi", "seed", "reward_rescale", "eval_every", "out_dir",
)
_INT_KEYS = {"num_states", "dim", "steps", "group_size", "rollouts_per_epoch", "updates_per_epoch", "epochs",
             "seed", "eval_every"}
_FLOAT_KEYS = {"alpha_min", "beta", "clip_eps", "kl_old_coeff", "lr_theta", "lr_phi"}
PLOT_METRICS = ("mean_reward", "kl_to_ref", "loss", "ess", "tv_to_tilt")


class ConfigError(ValueError):
    """A config file could not be parsed; the message carries the line number."""


def _convert(key: str, raw: str, lineno: int):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects a number, got {raw!r}") from None
    if key == "reward_rescale":
        if raw not in ("on", "off"):
            raise ConfigError(f"line {lineno}: reward_rescale must be 'on' or 'off', got {raw!r}")
        return raw == "on"
    if not raw:
        raise ConfigError(f"line {lineno}: {key} needs a value")
    return raw


def parse_config_text(text: str) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, lineno)
    return TrainConfig(**values)


def parse_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def serialise_config(config: TrainConfig) -> str:
    fields = asdict(config)
    lines = []
    for key in CONFIG_KEYS:
        v = fields[key]
        if isinstance(v, bool):
            v = "on" if v else "off"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.to_csv() + "\n")


def read_metrics_csv(path) -> list[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("unexpected metrics header")
    return [MetricsRow.from_csv(line) for line in lines[1:] if line]


def write_plots(out_dir, rows) -> list[Path]:
    """One SVG line chart per metric; deterministic output (no timestamp, fixed hash salt)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    epochs = [r.epoch for r in rows]
    with matplotlib.rc_context({"svg.hashsalt": "vmpo", "svg.fonttype": "none"}):
        for metric in PLOT_METRICS:
            values = [getattr(r, metric) for r in rows]
            if not values or any(v is None for v in values):
                continue
            fig, ax = plt.subplots(figsize=(5, 3.2))
            ax.plot(epochs, values, lw=1.2)
            ax.set_xlabel("epoch")
            ax.set_ylabel(metric)
            fig.tight_layout()
            path = out_dir / f"{metric}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written


def _run_train(config: TrainConfig, out_dir: Path, plot: bool, wall_clock: bool) -> Path:
    result = train(config, clock=time.perf_counter if wall_clock else None)
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(csv_path, result.rows)
    if plot:
        write_plots(out_dir, result.rows)
    return csv_path


def _sweep_cell(args):
    config, out_dir, plot, wall_clock = args
    return _run_train(config, out_dir, plot, wall_clock)


def _cmd_train(args) -> int:
    config = parse_config(args.config)
    out_dir = Path(args.out_dir or config.out_dir)
    csv_path = _run_train(config, out_dir, args.plot, args.wall_clock)
    print(f"wrote {csv_path}")
    return 0


def _cmd_verify(args) -> int:
    from .gaussian import make_gaussian_chain
    from .tabular import standard_chain
    from .verify import run_all_checks

    config = parse_config(args.config)
    chain = standard_chain(config.num_states, config.steps)
    gchain = make_gaussian_chain(config.dim, config.steps, config.alpha_min)
    results = run_all_checks(chain, config.beta, config.group_size, config.seed, gchain)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _cmd_sweep(args) -> int:
    config = parse_config(args.config)
    betas = [float(b) for b in args.betas.split(",")] if args.betas else [config.beta / 2, config.beta, config.beta * 2]
    if args.objectives:
        objectives = args.objectives.split(",")
        bad = [o for o in objectives if o not in OBJECTIVE_KINDS]
        if bad:
            raise ConfigError(f"unknown objective(s) in --objectives: {bad}")
    else:
        objectives = [o for o in OBJECTIVE_KINDS if not (config.model == "tabular" and o == "grad_matching")]
    root = Path(args.out_dir or config.out_dir)
    cells = []
    for objective in objectives:
        for beta in betas:
            cell = replace(config, objective=objective, beta=beta)
            cells.append((cell, root / f"{objective}_beta{beta!r}", args.plot, args.wall_clock))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            paths = list(pool.map(_sweep_cell, cells))
    else:
        paths = [_sweep_cell(c) for c in cells]
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmpo", description="Variance-minimisation alignment on toy diffusion chains.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="flat key = value config file")
        p.add_argument("--out-dir", default=None, help="override out_dir from the config")
        p.add_argument("--plot", action="store_true", help="also write one SVG chart per metric")
        p.add_argument("--wall-clock", action="store_true",
                       help="record elapsed seconds (makes the CSV run-dependent)")

    p_train = sub.add_parser("train", help="train one configuration and write metrics.csv")
    common(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_verify = sub.add_parser("verify", help="run the oracle checks on the configured fixture")
    p_verify.add_argument("config")
    p_verify.set_defaults(func=_cmd_verify)

    p_sweep = sub.add_parser("sweep", help="grid over beta and objective kinds, one CSV per cell")
    common(p_sweep)
    p_sweep.add_argument("--betas", default=None, help="comma-separated temperatures (default: beta/2, beta, 2 beta)")
    p_sweep.add_argument("--objectives", default=None, help="comma-separated objective kinds (default: all applicable)")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_sweep.set_defaults(func=_cmd_sweep)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ConfigDomainError, SizeLimitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
