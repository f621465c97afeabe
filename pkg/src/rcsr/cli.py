"""Command line surface: train, compare modes, verify gradients, inspect
partitions, and describe model capacity.

Every run directory is written with the delimited metrics stream, the
final metrics as JSON, a resumable checkpoint, and rendered figures.
Exit codes: 0 success, 1 runtime failure, 2 configuration problem.
"""

from __future__ import annotations

import csv
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import model as model_mod
from . import report as report_mod
from . import router as router_mod
from . import server as server_mod
from .config import ConfigError, MODES, TrainingConfig

OUTPUT_ENV = "RCSR_OUTPUT_DIR"

CSV_COLUMNS = ("round", "mean_loss", "router_loss", "weight_entropy",
               "q_entropy", "i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1",
               "t2i_r5", "t2i_r10", "mean_recall", "fairness_std",
               "worst_r1")


def _fmt(value) -> str:
    """Stable scalar formatting: shortest round-trip repr for floats."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form field=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(config_path: str | None, overrides=(), **direct) -> TrainingConfig:
    """Layered resolution: file, then --set pairs, then named options."""
    config = (config_mod.load_config(config_path) if config_path
              else TrainingConfig())
    changes = dict(_parse_override(item) for item in overrides)
    changes.update({k: v for k, v in direct.items() if v is not None})
    return config.replace(**changes) if changes else config


def _resolve_output(output: str | None, default_leaf: str) -> Path:
    if output:
        return Path(output)
    base = os.environ.get(OUTPUT_ENV, "runs")
    return Path(base) / default_leaf


def _metric_cells(metrics) -> list:
    if metrics is None:
        return [None] * 9
    return [metrics.i2t[1], metrics.i2t[5], metrics.i2t[10],
            metrics.t2i[1], metrics.t2i[5], metrics.t2i[10],
            metrics.mean_recall, metrics.fairness_std, metrics.worst_r1]


def write_metrics_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for record in records:
            row = [record.round_index, record.mean_loss, record.router_loss,
                   record.weight_entropy, record.q_entropy]
            row.extend(_metric_cells(record.metrics))
            writer.writerow(_fmt(cell) for cell in row)


def _metrics_dict(metrics) -> dict:
    return {
        "i2t": {str(k): v for k, v in sorted(metrics.i2t.items())},
        "t2i": {str(k): v for k, v in sorted(metrics.t2i.items())},
        "mean_recall": metrics.mean_recall,
        "per_client_r1": {str(k): v for k, v in
                          sorted(metrics.per_client_r1.items())},
        "excluded_clients": list(metrics.excluded_clients),
        "fairness_std": metrics.fairness_std,
        "worst_r1": metrics.worst_r1,
        "r1_gap": metrics.r1_gap,
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _mean_r1(metrics) -> float:
    return 0.5 * (metrics.i2t[1] + metrics.t2i[1])


class _Guard:
    """Translate failures into the documented exit codes."""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, SystemExit):
            return False
        if isinstance(exc, (ConfigError, FileNotFoundError)):
            click.echo(f"configuration error: {exc}", err=True)
            raise SystemExit(2)
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(1)


@click.group()
def main():
    """Federated cross-modal retrieval simulator."""


@main.command()
@click.option("--config", "config_path", default=None,
              help="JSON configuration file.")
@click.option("--mode", type=click.Choice(MODES), default=None,
              help="Aggregation mode override.")
@click.option("--seed", type=int, default=None, help="Master seed override.")
@click.option("--rounds", type=int, default=None,
              help="Total round count override.")
@click.option("--workers", type=int, default=None,
              help="Client training thread count override.")
@click.option("--output", "-o", default=None,
              help=f"Run directory (default: ${OUTPUT_ENV} or ./runs).")
@click.option("--resume", default=None,
              help="Checkpoint file to continue from.")
@click.option("--set", "overrides", multiple=True, metavar="FIELD=VALUE",
              help="Any configuration field override; repeatable.")
@click.option("--quiet", is_flag=True, help="Suppress per-round progress.")
def run(config_path, mode, seed, rounds, workers, output, resume, overrides,
        quiet):
    """Train one federation and write metrics, figures, and a checkpoint."""
    with _Guard():
        cfg = build_config(config_path, overrides, mode=mode,
                           master_seed=seed, rounds=rounds, workers=workers)
        if resume:
            state = server_mod.load_checkpoint(resume)
            cfg = state.config.replace(**{
                k: v for k, v in (("rounds", rounds), ("workers", workers))
                if v is not None})
            state.config = cfg
        else:
            state = server_mod.init_state(cfg)

        out_dir = _resolve_output(output,
                                  f"{cfg.mode}_seed{cfg.master_seed}")
        out_dir.mkdir(parents=True, exist_ok=True)

        def progress(record):
            if cfg.checkpoint_interval > 0 and (
                    record.round_index % cfg.checkpoint_interval == 0):
                server_mod.save_checkpoint(
                    out_dir / f"checkpoint_round_{record.round_index}.npz",
                    state)
            if not quiet:
                note = ""
                if record.metrics is not None:
                    note = (f"  mean recall {record.metrics.mean_recall:.4f}"
                            f"  worst R@1 {record.metrics.worst_r1:.4f}")
                click.echo(f"round {record.round_index:4d}  "
                           f"loss {record.mean_loss:.4f}{note}")

        started = time.time()
        state, history, final = server_mod.run_training(cfg, state, progress)
        elapsed = time.time() - started

        write_metrics_csv(out_dir / "metrics.csv", history)
        _write_json(out_dir / "final_metrics.json", {
            "mode": cfg.mode, "seed": cfg.master_seed,
            "rounds": state.round_index, **_metrics_dict(final)})
        server_mod.save_checkpoint(out_dir / "state.npz", state)
        figures = report_mod.render_run_figures(history, str(out_dir))

        click.echo(f"finished {len(history)} rounds in {elapsed:.1f}s "
                   f"({cfg.mode}, seed {cfg.master_seed})")
        click.echo(f"  mean recall      {final.mean_recall:.4f}")
        click.echo(f"  R@1 image-text   {final.i2t[1]:.4f}")
        click.echo(f"  R@1 text-image   {final.t2i[1]:.4f}")
        click.echo(f"  fairness std     {final.fairness_std:.4f}")
        click.echo(f"  worst client R@1 {final.worst_r1:.4f}")
        click.echo(f"wrote {out_dir / 'metrics.csv'}, final_metrics.json, "
                   f"state.npz, {len(figures)} figures")


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--modes", default="fedavg,rcsr",
              help="Comma-separated mode list.")
@click.option("--seeds", default="0,1,2", help="Comma-separated seed list.")
@click.option("--output", "-o", default=None)
@click.option("--set", "overrides", multiple=True, metavar="FIELD=VALUE")
def compare(config_path, modes, seeds, output, overrides):
    """Run a modes-by-seeds grid and tabulate final retrieval quality."""
    with _Guard():
        base = build_config(config_path, overrides)
        mode_list = [m.strip() for m in modes.split(",") if m.strip()]
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        if not mode_list or not seed_list:
            raise ConfigError("compare needs at least one mode and one seed")
        for mode in mode_list:
            if mode not in MODES:
                raise ConfigError(f"mode: '{mode}' not one of {MODES}")

        out_dir = _resolve_output(output, "compare")
        out_dir.mkdir(parents=True, exist_ok=True)
        rows, failures = [], 0
        for mode in mode_list:
            r1s, fair, worst = [], [], []
            for seed in seed_list:
                cfg = base.replace(mode=mode, master_seed=seed)
                try:
                    _, _, final = server_mod.run_training(cfg)
                except Exception as err:
                    failures += 1
                    click.echo(f"cell ({mode}, seed {seed}) failed: {err}",
                               err=True)
                    continue
                r1s.append(_mean_r1(final))
                fair.append(final.fairness_std)
                worst.append(final.worst_r1)
            if r1s:
                rows.append({
                    "mode": mode, "seed_count": len(r1s),
                    "r1_mean": float(np.mean(r1s)),
                    "r1_std": float(np.std(r1s)),
                    "fair_std": float(np.mean(fair)),
                    "worst_r1": float(np.mean(worst))})

        with open(out_dir / "compare.csv", "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            header = ("mode", "seed_count", "r1_mean", "r1_std", "fair_std",
                      "worst_r1")
            writer.writerow(header)
            for row in rows:
                writer.writerow(_fmt(row[col]) for col in header)
        _write_json(out_dir / "compare.json", {"rows": rows})
        if rows:
            report_mod.render_compare_figure(rows, str(out_dir))

        click.echo(f"{'mode':10s} {'seeds':>5s} {'R@1 mean':>9s} "
                   f"{'R@1 std':>8s} {'fair std':>9s} {'worst R@1':>9s}")
        for row in rows:
            click.echo(f"{row['mode']:10s} {row['seed_count']:5d} "
                       f"{row['r1_mean']:9.4f} {row['r1_std']:8.4f} "
                       f"{row['fair_std']:9.4f} {row['worst_r1']:9.4f}")
        click.echo(f"wrote {out_dir / 'compare.csv'}")
        if failures:
            click.echo(f"{failures} grid cells failed; results are partial",
                       err=True)
            raise SystemExit(1)


@main.command()
@click.option("--seeds", default=20, show_default=True,
              help="Seeded instances per graph.")
@click.option("--tolerance", default=1e-4, show_default=True,
              help="Max allowed relative gradient error.")
def gradcheck(seeds, tolerance):
    """Compare every loss graph against central finite differences."""
    with _Guard():
        results = gradcheck_mod.run_checks(seed_count=seeds,
                                           tolerance=tolerance)
        failed = False
        for result in results:
            status = "pass" if result.passed else "FAIL"
            click.echo(f"{result.name:28s} max rel err {result.max_error:.3e}"
                       f"  {status}")
            failed = failed or not result.passed
        if failed:
            raise SystemExit(1)
        click.echo(f"all {len(results)} graphs within {tolerance:g} "
                   f"over {seeds} seeds")


@main.command("partition-stats")
@click.option("--config", "config_path", default=None)
@click.option("--set", "overrides", multiple=True, metavar="FIELD=VALUE")
def partition_stats(config_path, overrides):
    """Describe the client partition: sizes, modalities, class histograms."""
    with _Guard():
        cfg = build_config(config_path, overrides)
        train = data_mod.generate_dataset(
            cfg.num_classes, cfg.per_class, cfg.latent_dim,
            cfg.raw_dim_image, cfg.raw_dim_text, cfg.noise, cfg.master_seed,
            split="train")
        parts = data_mod.dirichlet_partition(train.labels, cfg.num_clients,
                                             cfg.alpha, cfg.master_seed)
        types = data_mod.assign_modalities(cfg.num_clients, cfg.missing_rate,
                                           cfg.master_seed)
        click.echo(f"{cfg.num_clients} clients over "
                   f"{cfg.num_classes * cfg.per_class} items, "
                   f"concentration {cfg.alpha}, seed {cfg.master_seed}")
        sizes = []
        for cid, indices in enumerate(parts):
            train_idx, hold_idx = data_mod.split_holdout(
                indices, cfg.holdout_fraction, cfg.master_seed, cid)
            sizes.append(len(indices))
            hist = np.bincount(train.labels[indices],
                               minlength=cfg.num_classes)
            present = int((hist > 0).sum())
            click.echo(f"client {cid:3d}  {types[cid]:10s} "
                       f"{len(indices):5d} items ({len(train_idx)} train, "
                       f"{len(hold_idx)} holdout)  {present:3d} classes  "
                       f"histogram {' '.join(str(c) for c in hist)}")
        click.echo(f"sizes: min {min(sizes)}, max {max(sizes)}, "
                   f"mean {np.mean(sizes):.1f}")


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--set", "overrides", multiple=True, metavar="FIELD=VALUE")
def describe(config_path, overrides):
    """Print trainable parameter counts for the configured model."""
    with _Guard():
        cfg = build_config(config_path, overrides)
        enc = cfg.encoder()
        counts = model_mod.param_count(enc)
        router_shapes = router_mod.router_shapes(cfg.router_config())
        router_total = sum(r * c for r, c in router_shapes.values())
        click.echo(f"encoder widths {enc.backbone_width_image}"
                   f"/{enc.backbone_width_text}, {enc.num_blocks} adapter "
                   f"blocks, bottleneck {enc.bottleneck_dim}, "
                   f"embedding {enc.embed_dim}")
        click.echo(f"adapter parameters    {counts['adapters']:>12,}")
        click.echo(f"head parameters       {counts['heads']:>12,}")
        click.echo(f"total trainable       {counts['total']:>12,}")
        click.echo(f"router parameters     {router_total:>12,}")


if __name__ == "__main__":
    main()
