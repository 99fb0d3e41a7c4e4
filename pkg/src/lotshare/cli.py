"""`lotshare` command line: generate-data, train, compare, prune-sweep,
score, mask stats. One command per process; exit codes 0/2/3/4."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from . import masking, metrics, model, training
from .config import ExperimentConfig, load_experiment
from .errors import (ConfigError, DataError, InvariantError, LotshareError,
                     StateError)
from .metrics import MetricsReport, RankInput, format_gain, mtl_gain
from .model import SharingMode, Task, TASKS

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def _load_dataset(exp: ExperimentConfig) -> data_mod.Dataset:
    if exp.dataset_path:
        return data_mod.load(exp.dataset_path)
    return data_mod.generate(exp.synth)


def _history_kv(entry: dict) -> str:
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                    for k, v in entry.items())


def build_report(art: training.TrainedArtifacts, dataset: data_mod.Dataset,
                 mcfg: model.ModelConfig, exp: ExperimentConfig) -> MetricsReport:
    report = MetricsReport(
        mode=art.mode.value,
        metrics=training.evaluate_artifacts(art, dataset, mcfg, split="test"),
        config_fingerprint=exp.fingerprint(),
        notes={
            "hidden_activation": "relu",
            "cross_kind": mcfg.cross_kind.value,
            "quantile_pool": "global_surviving",
            "optimizer_reset_on_rewind": "true",
        },
    )
    if art.masks is not None:
        for task in TASKS:
            m = art.best_mask(task)
            report.sparsity[task.value] = m.survivor_fraction()
            report.notes[f"best_round_{task.value}"] = str(art.best_i[task])
        stats = masking.overlap_stats(art.best_mask(Task.CTR), art.best_mask(Task.CVR))
        report.overlap.update({"shared": stats.shared, "ctr_only": stats.ctr_only,
                               "cvr_only": stats.cvr_only, "dead": stats.dead})
    return report


def write_run_dir(outdir: Path, exp: ExperimentConfig,
                  art: training.TrainedArtifacts, mcfg: model.ModelConfig,
                  report: MetricsReport, config_text: str | None = None) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.cfg").write_text(config_text if config_text is not None
                                       else exp.to_text(), encoding="utf-8")
    if isinstance(art.params, dict):
        for task in TASKS:
            model.save_checkpoint(outdir / f"{task.value}.ckpt", art.params[task], mcfg)
    else:
        model.save_checkpoint(outdir / "model.ckpt", art.params, mcfg)
    if art.masks is not None:
        mask_dir = outdir / "masks"
        mask_dir.mkdir(exist_ok=True)
        for task in TASKS:
            for rnd, m in enumerate(art.masks[task]):
                masking.save_mask(mask_dir / f"{task.value}_round{rnd}.mask", m)
            masking.save_mask(outdir / f"mask_{task.value}.mask", art.best_mask(task))
    with open(outdir / "train.log", "w", encoding="utf-8") as fh:
        for entry in art.history:
            fh.write(_history_kv(entry) + "\n")
    (outdir / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    (outdir / "report.kv").write_text("\n".join(report.to_kv_lines()) + "\n",
                                      encoding="utf-8")


def comparison_table(reports: list[MetricsReport]) -> str:
    """Table-2-style comparison; gains computed against the single_task row."""
    single = next((r for r in reports if r.mode == SharingMode.SINGLE_TASK.value), None)
    if single is None:
        raise ConfigError("compare needs a single_task run (MTL gain is undefined without it)")
    ordered = [single] + [r for r in reports if r is not single]
    rows = [("Model", "CVR MSE", "CTR AUC", "MTL Gain CVR", "MTL Gain CTR")]
    for rep in ordered:
        cvr = rep.metrics.get("cvr_mse")
        ctr = rep.metrics.get("ctr_auc")
        if rep is single:
            gain_cvr = gain_ctr = "-"
        else:
            if cvr is not None and single.metrics.get("cvr_mse") is not None:
                gain_cvr = format_gain(*mtl_gain(single.metrics["cvr_mse"], cvr, Task.CVR))
            else:
                gain_cvr = "n/a"
            if ctr is not None and single.metrics.get("ctr_auc") is not None:
                gain_ctr = format_gain(*mtl_gain(single.metrics["ctr_auc"], ctr, Task.CTR))
            else:
                gain_ctr = "n/a"
        rows.append((rep.mode,
                     f"{cvr:.5f}" if cvr is not None else "n/a",
                     f"{ctr:.5f}" if ctr is not None else "n/a",
                     gain_cvr, gain_ctr))
    widths = [max(len(r[c]) for r in rows) for c in range(5)]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                     for row in rows)


_CONFIG_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="key = value config file"),
    click.option("--mode", type=str, default=None,
                 help="single_task | layer_share | connection_share | neuron_share"),
    click.option("--dataset", type=click.Path(), default=None,
                 help="dataset TSV (omit to use synthetic data from the config)"),
    click.option("--seed", type=int, default=None),
    click.option("--out", "output_dir", type=click.Path(), default=None,
                 help="run output directory"),
    click.option("--set", "extra", multiple=True, metavar="KEY=VALUE",
                 help="override any config key"),
]


def _with_config_options(fn):
    for opt in reversed(_CONFIG_OPTIONS):
        fn = opt(fn)
    return fn


def _build_exp(config_path, mode, dataset, seed, output_dir, extra) -> ExperimentConfig:
    overrides: dict[str, str] = {}
    for item in extra:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if mode is not None:
        overrides["mode"] = mode
    if dataset is not None:
        overrides["dataset"] = dataset
    if seed is not None:
        overrides["seed"] = str(seed)
    if output_dir is not None:
        overrides["output_dir"] = output_dir
    return load_experiment(config_path, overrides)


@click.group()
def cli():
    """Multi-task CTR/CVR training with neuron-connection level sharing."""


@cli.command("generate-data")
@_with_config_options
@click.option("--out-file", type=click.Path(), default=None,
              help="dataset TSV path (default <output_dir>/dataset.tsv)")
def cmd_generate_data(config_path, mode, dataset, seed, output_dir, extra, out_file):
    """Generate a synthetic CTR/CVR dataset and write it with its sidecar spec."""
    exp = _build_exp(config_path, mode, dataset, seed, output_dir, extra)
    path = Path(out_file) if out_file else Path(exp.output_dir) / "dataset.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    ds = data_mod.generate(exp.synth)
    data_mod.save(ds, path)
    Path(str(path) + ".spec").write_text(
        "\n".join(exp.synth.to_kv_lines()) + "\n", encoding="utf-8")
    counts = ds.counts()
    click.echo(f"wrote {path}")
    click.echo("dataset        #user  #item  #impression  #click  #conversion")
    click.echo(f"synthetic      {exp.synth.n_users:>5}  {exp.synth.n_items:>5}  "
               f"{counts['impressions']:>11}  {counts['clicks']:>6}  "
               f"{counts['conversions']:>11}")


@cli.command("train")
@_with_config_options
def cmd_train(config_path, mode, dataset, seed, output_dir, extra):
    """Train the configured sharing mode end to end and write the run dir."""
    exp = _build_exp(config_path, mode, dataset, seed, output_dir, extra)
    ds = _load_dataset(exp)
    mcfg = exp.model_config(ds.field_cardinalities)
    art = training.train_model(ds, mcfg, exp.train)
    report = build_report(art, ds, mcfg, exp)
    outdir = Path(exp.output_dir)
    config_text = None
    if config_path is not None:
        config_text = Path(config_path).read_text(encoding="utf-8")
    write_run_dir(outdir, exp, art, mcfg, report, config_text)
    for entry in art.history:
        click.echo(_history_kv(entry))
    click.echo(report.to_text())
    click.echo(f"run written to {outdir}")


@cli.command("compare")
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
def cmd_compare(run_dirs):
    """Compare run directories against the single_task run (Table-2 style)."""
    reports = []
    for d in run_dirs:
        kv_path = Path(d) / "report.kv"
        if not kv_path.exists():
            raise DataError(f"{d}: no report.kv (not a finished run directory)")
        reports.append(MetricsReport.from_kv_lines(
            kv_path.read_text(encoding="utf-8").splitlines()))
    click.echo(comparison_table(reports))


@cli.command("prune-sweep")
@_with_config_options
@click.option("--curve-file", type=click.Path(), default=None,
              help="TSV output (default <output_dir>/sweep.tsv)")
def cmd_prune_sweep(config_path, mode, dataset, seed, output_dir, extra, curve_file):
    """Warmup + mask generation only; emit the per-round sparsity/score curve."""
    exp = _build_exp(config_path, mode, dataset, seed, output_dir, extra)
    if exp.mode not in (SharingMode.CONNECTION_SHARE, SharingMode.NEURON_SHARE):
        raise ConfigError(f"prune-sweep needs a pruning mode, got {exp.mode.value}")
    ds = _load_dataset(exp)
    mcfg = exp.model_config(ds.field_cardinalities)
    history: list[dict] = []
    params = model.init_params(mcfg, exp.train.seed)
    training.warmup(params, ds, mcfg, exp.train, history)
    training.generate_masks(params, ds, mcfg, exp.train, history)
    outdir = Path(exp.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = Path(curve_file) if curve_file else outdir / "sweep.tsv"
    rows = [e for e in history if e.get("stage") == "mask_gen"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("task\tround\tproportion_left\tval_metric\n")
        for e in rows:
            fh.write(f"{e['task']}\t{e['round']}\t{e['proportion_left']:.10g}\t"
                     f"{e['val']:.10g}\n")
    for e in rows:
        click.echo(_history_kv(e))
    click.echo(f"curve written to {path}")


def _read_candidates(path, n_fields: int) -> list[tuple[list[int], float]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'ids<TAB>length'")
            try:
                ids = [int(x) for x in parts[0].split(",")]
                length = float(parts[1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if len(ids) != n_fields:
                raise DataError(f"{path}:{lineno}: {len(ids)} ids for {n_fields} fields")
            if length <= 0:
                raise DataError(f"{path}:{lineno}: video length must be positive")
            out.append((ids, length))
    return out


@cli.command("score")
@click.option("--ctr-checkpoint", required=True, type=click.Path(exists=True))
@click.option("--cvr-checkpoint", required=True, type=click.Path(exists=True))
@click.option("--ctr-mask", type=click.Path(exists=True), default=None)
@click.option("--cvr-mask", type=click.Path(exists=True), default=None)
@click.option("-k", "top_k", type=int, default=1)
@click.option("--alpha", type=float, default=1.0)
@click.option("--beta", type=float, default=1.0)
@click.option("--gamma", type=float, default=1.0)
@click.argument("candidates_file", type=click.Path(exists=True))
def cmd_score(ctr_checkpoint, cvr_checkpoint, ctr_mask, cvr_mask, top_k,
              alpha, beta, gamma, candidates_file):
    """Rank candidates by pCTR^alpha * pCVR^beta * length^gamma."""
    ctr_cfg, ctr_params = model.load_checkpoint(ctr_checkpoint)
    cvr_cfg, cvr_params = model.load_checkpoint(cvr_checkpoint)
    if ctr_cfg.field_cardinalities != cvr_cfg.field_cardinalities:
        raise ConfigError("CTR and CVR checkpoints disagree on the feature schema")
    masks = {
        Task.CTR: masking.load_mask(ctr_mask) if ctr_mask else None,
        Task.CVR: masking.load_mask(cvr_mask) if cvr_mask else None,
    }
    cands = _read_candidates(candidates_file, ctr_cfg.n_fields)
    if not cands:
        raise DataError(f"{candidates_file}: no candidates")
    if top_k > len(cands):
        raise ConfigError(f"k={top_k} exceeds {len(cands)} candidates")
    ids = np.array([c[0] for c in cands], dtype=np.int64)
    pctr = training.predict(ctr_params, ctr_cfg, Task.CTR, ids, mask=masks[Task.CTR])
    pcvr = training.predict(cvr_params, cvr_cfg, Task.CVR, ids, mask=masks[Task.CVR])
    inputs = [RankInput(pctr=float(pctr[i]), pcvr=float(pcvr[i]),
                        video_length=cands[i][1],
                        alpha=alpha, beta=beta, gamma=gamma)
              for i in range(len(cands))]
    for rank, idx in enumerate(metrics.rank_top_k(inputs, top_k), start=1):
        click.echo(f"rank={rank} index={idx} score={metrics.rank_score(inputs[idx]):.10g} "
                   f"pctr={pctr[idx]:.6f} pcvr={pcvr[idx]:.6f} "
                   f"length={cands[idx][1]:g}")


@cli.group("mask")
def cmd_mask():
    """Mask file utilities."""


@cmd_mask.command("stats")
@click.argument("ctr_mask_file", type=click.Path(exists=True))
@click.argument("cvr_mask_file", type=click.Path(exists=True))
def cmd_mask_stats(ctr_mask_file, cvr_mask_file):
    """Overlap statistics of a CTR mask and a CVR mask."""
    stats = masking.overlap_stats(masking.load_mask(ctr_mask_file),
                                  masking.load_mask(cvr_mask_file))
    click.echo(stats.to_text())
    for line in stats.to_kv_lines():
        click.echo(line)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:  # --help etc.
        return exc.exit_code
    except (click.ClickException,) as exc:
        exc.show()
        return EXIT_CONFIG
    except click.Abort:
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except (InvariantError, StateError, LotshareError) as exc:
        click.echo(f"internal error: {exc}", err=True)
        return EXIT_INTERNAL
    except (IndexError, OSError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
