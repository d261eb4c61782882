"""
Command-line entry point ``naas``.

Commands:
    train   Train a sampler; writes checkpoints, metrics, samples and plots to a run directory.
    eval    Score a trained checkpoint against exact reference samples.
    sample  Draw samples from a trained checkpoint.
    ablate  Train one run per value of a swept configuration key and tabulate the results.

A run directory is laid out as::

    <out>/<benchmark>/<name>/
        config.resolved     fully resolved configuration; ``--config`` it to rerun exactly
        metrics.csv         one row per epoch, metrics and weights on the last row of a phase
        timing.csv          wall-clock seconds per epoch
        eval.csv            one row per ``eval`` invocation
        checkpoints/        u.ckpt, v.ckpt and stage<k>/ snapshots
        samples/            generated.csv, reference.csv, centers.csv
        plots/              samples.svg, history.svg, eval.svg

Usage:
    naas train --config mw54.cfg --seed 7
    naas eval out/mw54/run --n-samples 2000
    naas ablate --benchmark gmm40 --set energy.dim=4 --sweep schedule.sigma_max=1,50
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from mergedeep import merge

from NAAS.array_type import SampleSet
from NAAS.config import ExperimentConfig, load_config, parse_overrides
from NAAS.dynamics import simulate
from NAAS.exceptions import BufferStateError, ConfigError, InputError, NAASError
from NAAS.iws import RESAMPLING_METHODS, WeightSet, log_weight, resample
from NAAS.metrics import median_bandwidth, mmd, mode_weights, reference_samples, sinkhorn
from NAAS.net import load_checkpoint, save_checkpoint
from NAAS.plotting import plot_history, plot_samples
from NAAS.streams import stream
from NAAS.trainer import SAMPLE_KEY, NAASTrainer, sample_as_baseline

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
RESOLVED = "config.resolved"

METRIC_COLUMNS = ("stage", "phase", "epoch", "loss", "sinkhorn", "mmd", "ess", "iw_variance")
TIMING_COLUMNS = ("stage", "phase", "epoch", "seconds")
EVAL_COLUMNS = (
    "checkpoint",
    "benchmark",
    "mode",
    "seed",
    "n",
    "sinkhorn",
    "mmd",
    "bandwidth",
    "ess",
    "iw_variance",
    "mode_error",
    "mode_min",
    "resample",
    "sinkhorn_resampled",
    "mmd_resampled",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_rows(path, rows, columns, append: bool = False) -> None:
    """
    Write ``rows`` (mappings) as CSV with a fixed column order.

    Floats are written with 17 significant digits and ``None`` as an empty cell, so equal
    values always produce equal bytes. With ``append`` the header is only written to a new file.
    """
    path = Path(path)
    new = not append or not path.exists()
    with path.open("w" if not append else "a", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if new:
            writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(column)) for column in columns])


def run_directory(config: ExperimentConfig) -> Path:
    return Path(config.run.out) / config.run.benchmark / config.run.name


def _save_controls(u_net, v_net, directory: Path, step: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(u_net, directory / "u.ckpt", step=step, role="u")
    save_checkpoint(v_net, directory / "v.ckpt", step=step, role="v")


def _export_centers(target, path: Path) -> None:
    if hasattr(target, "export_centers"):
        target.export_centers(path)


def run_train(config: ExperimentConfig, progress: bool = False) -> Path:
    """
    Train the controls described by ``config`` and write every artifact of the run.

    Returns
    -------
    Path
        The run directory.
    """
    out = run_directory(config)
    for sub in ("checkpoints", "samples", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    config.save(out / RESOLVED)
    logger.info("run directory %s", out)

    pot = config.build_potential()
    trainer = NAASTrainer(config.train_config(progress), pot, config.seed)

    def snapshot(stage, trainer):
        _save_controls(trainer.u_net, trainer.v_net, out / "checkpoints" / f"stage{stage}", stage)

    u_net, v_net, history = trainer.train(callback=snapshot)
    _save_controls(u_net, v_net, out / "checkpoints", config.train.stages)
    write_rows(out / "metrics.csv", history, METRIC_COLUMNS)
    write_rows(out / "timing.csv", trainer.timing, TIMING_COLUMNS)

    generated = trainer.draw(config.metrics.n_samples, (SAMPLE_KEY,))
    generated.to_csv(out / "samples" / "generated.csv")
    _export_centers(pot.target, out / "samples" / "centers.csv")
    if trainer.reference is not None:
        trainer.reference.to_csv(out / "samples" / "reference.csv")
        if generated.n:
            plot_samples(
                generated, trainer.reference, out / "plots" / "samples.svg", title=str(pot.target)
            )
    if any(row["sinkhorn"] is not None for row in history):
        plot_history(history, out / "plots" / "history.svg")
    logger.info("training finished; artifacts in %s", out)
    return out


def _checkpoint_directory(path) -> Path:
    path = Path(path)
    for candidate in (path / "checkpoints", path):
        if (candidate / "u.ckpt").is_file() and (candidate / "v.ckpt").is_file():
            return candidate
    raise InputError(f"no u.ckpt/v.ckpt pair under {path}")


def _run_root(path) -> Path:
    """Nearest directory at or above ``path`` holding a resolved configuration."""
    path = Path(path).resolve()
    for candidate in (path, *path.parents[:3]):
        if (candidate / RESOLVED).is_file():
            return candidate
    return path


def checkpoint_config(checkpoint, path=None, overrides: dict = None) -> ExperimentConfig:
    """
    Configuration for evaluating ``checkpoint``: ``path`` when given, otherwise the resolved
    configuration of the run the checkpoint belongs to.
    """
    if path is None:
        resolved = _run_root(checkpoint) / RESOLVED
        if not resolved.is_file():
            raise ConfigError(f"no {RESOLVED} found for {checkpoint}; pass --config")
        path = resolved
    return load_config(path, overrides)


def _load_controls(checkpoint, dim: int):
    directory = _checkpoint_directory(checkpoint)
    u_net, _ = load_checkpoint(directory / "u.ckpt")
    v_net, _ = load_checkpoint(directory / "v.ckpt")
    for role, net in (("u", u_net), ("v", v_net)):
        if net.dim != dim:
            raise InputError(f"{role} checkpoint has dimension {net.dim}, the target {dim}")
    return u_net, v_net


def _draw(config: ExperimentConfig, u_net, v_net, pot, n: int):
    """Samples at ``SAMPLE_KEY`` and, for the two-stage sampler, their importance weights."""
    t = config.train
    sched = config.train_config().noise_schedule()
    if t.mode == "as-baseline":
        return sample_as_baseline(v_net, sched, n, config.seed, t.n_prior, dim=pot.dim), None
    traj = simulate(
        v_net, u_net, pot, sched, t.n_prior, t.n_anneal, config.seed, n, key=(SAMPLE_KEY,)
    )
    generated = SampleSet(traj.terminal, provenance="generated", seed=config.seed)
    try:
        weights = WeightSet(log_weight(traj, v_net, u_net, pot))
    except BufferStateError as err:
        logger.warning("importance weights unavailable: %s", err)
        weights = None
    return generated, weights


def _mode_scores(target, generated) -> tuple:
    if not hasattr(target, "centers"):
        return None, None
    centers = target.centers
    weights = getattr(target, "weights", None)
    if weights is None:
        weights = [1.0 / len(centers)] * len(centers)
    shares = mode_weights(generated, centers)
    error = 0.5 * float(abs(shares - weights).sum())
    return error, float(shares.min())


def run_eval(checkpoint, config: ExperimentConfig) -> dict:
    """
    Sample from a checkpoint and score the samples against the target.

    Appends one row to ``eval.csv`` in the run directory and writes ``plots/eval.svg``.

    Returns
    -------
    dict
        The row, keyed by ``EVAL_COLUMNS``.
    """
    m = config.metrics
    n = m.n_samples
    if n < 1:
        raise ConfigError(f"metrics.n_samples must be positive, got {n}", key="metrics.n_samples")
    if m.resample != "none" and m.resample not in RESAMPLING_METHODS:
        raise ConfigError(f"unknown resampling method {m.resample!r}", key="metrics.resample")
    pot = config.build_potential()
    u_net, v_net = _load_controls(checkpoint, pot.dim)
    generated, weights = _draw(config, u_net, v_net, pot, n)
    reference = reference_samples(pot.target, n, stream(config.seed, "reference"))
    if m.mmd_bandwidth == "median":
        bandwidth = median_bandwidth(generated, reference)
    else:
        try:
            bandwidth = float(m.mmd_bandwidth)
        except ValueError:
            raise ConfigError(
                f"mmd_bandwidth must be 'median' or a number, got {m.mmd_bandwidth!r}",
                key="metrics.mmd_bandwidth",
            ) from None

    def score(samples):
        distance = sinkhorn(
            samples, reference, m.sinkhorn_epsilon, m.sinkhorn_iters, m.sinkhorn_tol
        )
        return distance, mmd(samples, reference, bandwidth)

    row = {
        "checkpoint": str(checkpoint),
        "benchmark": config.run.benchmark,
        "mode": config.train.mode,
        "seed": config.seed,
        "n": n,
        "bandwidth": bandwidth,
        "resample": m.resample,
    }
    row["sinkhorn"], row["mmd"] = score(generated)
    row["mode_error"], row["mode_min"] = _mode_scores(pot.target, generated)
    if weights is not None:
        row["ess"], row["iw_variance"] = weights.ess, weights.variance
        logger.info("%s", weights)
        if m.resample != "none":
            resampled = SampleSet(
                resample(generated, weights, stream(config.seed, "resample"), m.resample),
                provenance="resampled",
                seed=config.seed,
            )
            row["sinkhorn_resampled"], row["mmd_resampled"] = score(resampled)

    root = _run_root(checkpoint)
    (root / "plots").mkdir(parents=True, exist_ok=True)
    write_rows(root / "eval.csv", [row], EVAL_COLUMNS, append=True)
    plot_samples(generated, reference, root / "plots" / "eval.svg", title=str(pot.target))
    logger.info("eval: Sinkhorn %.6g, MMD %.6g (n=%d)", row["sinkhorn"], row["mmd"], n)
    return row


def run_sample(checkpoint, config: ExperimentConfig) -> Path:
    """Draw ``metrics.n_samples`` samples from a checkpoint into ``samples/`` of its run."""
    n = config.metrics.n_samples
    if n < 1:
        raise ConfigError(f"metrics.n_samples must be positive, got {n}", key="metrics.n_samples")
    pot = config.build_potential()
    u_net, v_net = _load_controls(checkpoint, pot.dim)
    generated, _ = _draw(config, u_net, v_net, pot, n)
    directory = _run_root(checkpoint) / "samples"
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"sampled_seed{config.seed}.csv"
    generated.to_csv(path)
    logger.info("wrote %d samples to %s", n, path)
    return path


def parse_sweep(spec: str) -> tuple[str, str, list]:
    """Split ``section.key=v1,v2,...`` into the section, the key and the values."""
    target, _, values = spec.partition("=")
    values = [value.strip() for value in values.split(",") if value.strip()]
    if not values:
        raise ConfigError(f"expected section.key=v1,v2,..., got {spec!r}", "<sweep>")
    layer = parse_overrides([f"{target}={values[0]}"])
    section = next(iter(layer))
    key = next(iter(layer[section]))
    if section == "run" and key in ("name", "out"):
        raise ConfigError(f"run.{key} cannot be swept", "<sweep>", key=f"run.{key}")
    return section, key, values


def run_ablation(base: ExperimentConfig, sweep: str, progress: bool = False) -> list:
    """
    Train one run per value of a single configuration key under the budget of ``base``.

    Each cell gets its own run directory ``<base name>/<section.key>=<value>``; the comparison
    table, one row per cell with its final evaluation, is written to ``ablation.csv`` in the
    base run directory.
    """
    section, key, values = parse_sweep(sweep)
    swept = f"{section}.{key}"
    rows = []
    for value in values:
        overrides = merge(
            {section: {key: value}}, {"run": {"name": f"{base.run.name}/{swept}={value}"}}
        )
        cell = load_config(text=base.dumps(), overrides=overrides, environ={})
        out = run_train(cell, progress)
        history = [
            row for row in _read_rows(out / "metrics.csv") if row["sinkhorn"] not in ("", None)
        ]
        final = history[-1] if history else {}
        rows.append(
            {
                "key": swept,
                "value": value,
                "stage": final.get("stage"),
                "phase": final.get("phase"),
                "loss": final.get("loss"),
                "sinkhorn": final.get("sinkhorn"),
                "mmd": final.get("mmd"),
                "run": str(out),
            }
        )
        logger.info(
            "%s=%s: Sinkhorn %s, MMD %s", swept, value, final.get("sinkhorn"), final.get("mmd")
        )
    table = run_directory(base) / "ablation.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    write_rows(table, rows, ("key", "value", "stage", "phase", "loss", "sinkhorn", "mmd", "run"))
    logger.info("ablation table written to %s", table)
    return rows


def _read_rows(path) -> list:
    with Path(path).open(newline="") as handle:
        return list(csv.DictReader(handle))


def _overrides(args) -> dict:
    """Configuration layer from the command-line flags; flags win over ``--set``."""
    layer = parse_overrides(args.set)
    flags = {}
    for name, section, key in (
        ("benchmark", "run", "benchmark"),
        ("profile", "run", "profile"),
        ("name", "run", "name"),
        ("seed", "run", "seed"),
        ("out", "run", "out"),
        ("mode", "train", "mode"),
        ("n_samples", "metrics", "n_samples"),
    ):
        value = getattr(args, name, None)
        if value is not None:
            flags.setdefault(section, {})[key] = str(value)
    if getattr(args, "steps", None) is not None:
        flags.setdefault("train", {}).update(n_prior=str(args.steps), n_anneal=str(args.steps))
    return merge(layer, flags)


def _cmd_train(args) -> int:
    run_train(load_config(args.config, _overrides(args)), args.progress)
    return 0


def _cmd_eval(args) -> int:
    config = checkpoint_config(args.checkpoint, args.config, _overrides(args))
    row = run_eval(args.checkpoint, config)
    print(", ".join(f"{key}={_cell(row.get(key))}" for key in EVAL_COLUMNS if key != "checkpoint"))
    return 0


def _cmd_sample(args) -> int:
    config = checkpoint_config(args.checkpoint, args.config, _overrides(args))
    print(run_sample(args.checkpoint, config))
    return 0


def _cmd_ablate(args) -> int:
    run_ablation(load_config(args.config, _overrides(args)), args.sweep, args.progress)
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="Configuration file")
    parser.add_argument("--benchmark", default=None, help="Benchmark preset (run.benchmark)")
    parser.add_argument("--profile", default=None, help="Budget profile: full or desk")
    parser.add_argument("--name", default=None, help="Run name (run.name)")
    parser.add_argument("--seed", type=int, default=None, help="Run seed (run.seed)")
    parser.add_argument("--mode", default=None, help="naas, naas-biased or as-baseline")
    parser.add_argument("--out", default=None, help="Output root (run.out)")
    parser.add_argument("--n-samples", type=int, default=None, help="Samples to draw")
    parser.add_argument(
        "--steps", type=int, default=None, help="Euler-Maruyama steps per stage"
    )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override any configuration key; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="naas", description="Train and evaluate annealed adjoint diffusion samplers."
    )
    parser.add_argument(
        "--log-level",
        default=os.environ.get("NAAS_LOG_LEVEL", "INFO"),
        help="Logging level (default from NAAS_LOG_LEVEL, else INFO)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train a sampler")
    _add_common(train)
    train.add_argument("--progress", action="store_true", help="Show progress bars")
    train.set_defaults(func=_cmd_train)

    for name, func, text in (
        ("eval", _cmd_eval, "Score a checkpoint"),
        ("sample", _cmd_sample, "Draw samples from a checkpoint"),
    ):
        sub = commands.add_parser(name, help=text)
        sub.add_argument("checkpoint", help="Run directory or checkpoint directory")
        _add_common(sub)
        sub.set_defaults(func=func)

    ablate = commands.add_parser("ablate", help="Sweep one configuration key")
    _add_common(ablate)
    ablate.add_argument(
        "--sweep", required=True, metavar="SECTION.KEY=V1,V2", help="Key and values to sweep"
    )
    ablate.add_argument("--progress", action="store_true", help="Show progress bars")
    ablate.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    """
    Run the command line.

    Returns
    -------
    int
        0 on success, 2 for configuration errors, 1 for any other failure.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format=LOG_FORMAT)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"naas: {err}", file=sys.stderr)
        return 2
    except NAASError as err:
        logger.error("%s failed: %s", args.command, err)
        print(f"naas: {err}", file=sys.stderr)
        return 1
