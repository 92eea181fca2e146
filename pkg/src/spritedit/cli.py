"""Command-line entry points: pretrain, edit, sweep, ablate, dataset, serve.

The CLI is a thin client over the core package; every command resolves its
effective config (defaults, then --config file, then --set overrides), runs
the corresponding operation, and writes a manifest sufficient to reproduce
the run. Checkpoints and sessions default to subdirectories of IMAGIC_HOME.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import config as config_mod
from .runtime import tune_for_small_models

EXIT_MISSING_CHECKPOINTS = 3


def _load_cfg(config_path, overrides):
    if config_path is not None and not Path(config_path).exists():
        raise click.UsageError(f"config file not found: {config_path}")
    try:
        return config_mod.load_config(config_path, list(overrides))
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _require_bundle(ckpt_dir):
    from .artifacts import load_bundle

    try:
        return load_bundle(ckpt_dir)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        click.echo("run `spritedit pretrain` first or pass --ckpt", err=True)
        sys.exit(EXIT_MISSING_CHECKPOINTS)


def _resolve_input(text: str, resolution: int):
    """An input is either a PNG path or a sprite caption to render."""
    from . import imageio, sprites

    path = Path(text)
    if path.suffix.lower() == ".png" and path.exists():
        img = imageio.load_png(path)
        if img.shape[-1] != resolution:
            raise click.UsageError(
                f"input image must be {resolution}px at SR resolution, got {img.shape[-1]}px")
        return img
    spec = sprites.parse_caption(text)
    if spec is None:
        raise click.UsageError(
            f"input {text!r} is neither a PNG path nor a full sprite caption")
    return sprites.render_sprite(spec, resolution)


@click.group()
def main():
    """Text-driven sprite editing on a desk-scale cascaded diffusion model."""
    tune_for_small_models()


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="YAML config file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Dotted-key config override (repeatable).")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Checkpoint output directory.")
def pretrain(config_path, overrides, out_dir):
    """Train base, SR, scorer, and oracle components; write checkpoints."""
    cfg = _load_cfg(config_path, overrides)
    out = Path(out_dir) if out_dir else config_mod.data_root() / "checkpoints"
    from .artifacts import pretrain as run_pretrain
    from .errors import TrainingFailure

    try:
        run_pretrain(cfg, out, log=click.echo)
    except TrainingFailure as exc:
        click.echo(f"training failure: {exc}", err=True)
        sys.exit(1)
    click.echo(f"checkpoints written to {out}")


@main.command()
@click.argument("input_image")
@click.argument("target_text")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Session directory.")
@click.option("--ckpt", "ckpt_dir", type=click.Path(), default=None, help="Checkpoint directory.")
@click.option("--seed", type=int, default=None, help="Session seed.")
@click.option("--eta", type=float, default=None, help="Interpolation weight for stage C renders.")
@click.option("--seeds", type=str, default=None, help="Comma-separated render seeds.")
@click.option("--skip-finetune", is_flag=True, help="Run with zero fine-tune steps (ablation).")
@click.option("--sampler", type=click.Choice(["ddim", "ddpm"]), default=None)
@click.option("--guidance", type=float, default=None)
def edit(input_image, target_text, config_path, overrides, out_dir, ckpt_dir, seed, eta,
         seeds, skip_finetune, sampler, guidance):
    """Run the three-stage edit pipeline on INPUT_IMAGE toward TARGET_TEXT.

    INPUT_IMAGE is a 32px PNG path or a sprite caption to render.
    """
    cfg = _load_cfg(config_path, overrides)
    edit_cfg = dict(cfg["edit"])
    if seed is not None:
        edit_cfg["session_seed"] = seed
    if eta is not None:
        edit_cfg["eta"] = eta
    if seeds is not None:
        edit_cfg["seeds"] = [int(s) for s in seeds.split(",") if s != ""]
    if skip_finetune:
        edit_cfg["finetune_steps"] = 0
    if sampler is not None:
        edit_cfg["sampler"] = sampler
    if guidance is not None:
        edit_cfg["guidance"] = guidance

    from . import pipeline, sr as sr_mod
    from .pipeline import EditConfig

    bundle = _require_bundle(Path(ckpt_dir) if ckpt_dir else config_mod.data_root() / "checkpoints")
    x_sr = _resolve_input(input_image, 32)
    x_base = sr_mod.downsample(x_sr)
    session_root = (Path(out_dir) if out_dir
                    else config_mod.data_root() / "sessions" / "cli")
    session = pipeline.edit(bundle, x_base, x_sr, target_text,
                            EditConfig.from_dict(edit_cfg), session_root)
    click.echo(f"session {session.session_id} at {session.root}")
    rows = session.metrics_rows()
    click.echo(f"{'eta':>6} {'seed':>5} {'align':>8} {'psnr':>7}  recommended")
    for row in rows:
        mark = "*" if row.get("recommended") == "1" else ""
        click.echo(f"{row['eta']:>6} {row['seed']:>5} {float(row['alignment']):8.3f} "
                   f"{float(row['fidelity_psnr']):7.2f}  {mark}")
    best = [r for r in rows if r.get("recommended") == "1"]
    if best:
        path = session.render_path(float(best[0]["eta"]), int(best[0]["seed"]))
        click.echo(f"recommended render: {path}")


@main.command()
@click.argument("session_dirs", nargs=-1, required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--ckpt", "ckpt_dir", type=click.Path(), default=None)
def sweep(session_dirs, config_path, overrides, out_dir, ckpt_dir):
    """Alignment/fidelity sweep over eta for existing sessions."""
    cfg = _load_cfg(config_path, overrides)
    from . import evalbench, pipeline

    bundle = _require_bundle(Path(ckpt_dir) if ckpt_dir else config_mod.data_root() / "checkpoints")
    sessions, skipped = [], 0
    for d in session_dirs:
        try:
            sessions.append(pipeline.load_session(Path(d)))
        except Exception as exc:
            click.echo(f"warning: skipping {d}: {exc}", err=True)
            skipped += 1
    result = evalbench.eta_sweep(sessions, cfg["sweep"]["etas"], cfg["sweep"]["seeds"], bundle)
    out = Path(out_dir)
    evalbench.write_sweep_csv(result, out / "sweep.csv")
    evalbench.write_sweep_detail_csv(result, out / "sweep_detail.csv")
    evalbench.plot_sweep({"edit": result}, out / "sweep.png")
    config_mod.dump_yaml(cfg, out / "config.yaml")
    from .checkpoint import write_manifest

    entries = {f"config.{k}": v for k, v in config_mod.flatten(cfg).items()}
    entries["checkpoint.base_hash"] = bundle.base_hash()
    for i, s in enumerate(sessions):
        entries[f"session.{i}"] = f"{s.session_id}:{s.root}"
    write_manifest(out / "manifest.txt", entries)
    click.echo(f"sweep written to {out} ({skipped} inputs skipped)")
    sys.exit(0)


@main.group()
def ablate():
    """Ablation studies (finetune, opt-steps, seeds)."""


@ablate.command("finetune")
@click.argument("session_dirs", nargs=-1, required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--ckpt", "ckpt_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
def ablate_finetune_cmd(session_dirs, config_path, overrides, out_dir, ckpt_dir, seed):
    """Paired sweep: pretrained vs fine-tuned weights on the same sessions."""
    cfg = _load_cfg(config_path, overrides)
    from . import evalbench, pipeline

    bundle = _require_bundle(Path(ckpt_dir) if ckpt_dir else config_mod.data_root() / "checkpoints")
    sessions = [pipeline.load_session(Path(d)) for d in session_dirs]
    results, detail = evalbench.ablate_finetune(sessions, cfg["sweep"]["etas"], seed, bundle)
    out = Path(out_dir)
    for variant, result in results.items():
        evalbench.write_sweep_csv(result, out / f"sweep_{variant}.csv")
    evalbench.plot_sweep(results, out / "ablate_finetune.png",
                         title="pretrained vs fine-tuned")
    click.echo(f"paired curves written to {out}")


@ablate.command("opt-steps")
@click.argument("input_image")
@click.argument("target_text")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--ckpt", "ckpt_dir", type=click.Path(), default=None)
@click.option("--grid", type=str, default="10,100,1000", help="Stage A step counts.")
@click.option("--seed", type=int, default=0)
def ablate_opt_steps_cmd(input_image, target_text, config_path, overrides, out_dir,
                         ckpt_dir, grid, seed):
    """Stage A step-count study: embedding distances plus per-variant sweeps."""
    cfg = _load_cfg(config_path, overrides)
    from . import evalbench, sr as sr_mod
    from .pipeline import EditConfig

    bundle = _require_bundle(Path(ckpt_dir) if ckpt_dir else config_mod.data_root() / "checkpoints")
    x_sr = _resolve_input(input_image, 32)
    x_base = sr_mod.downsample(x_sr)
    steps_grid = tuple(int(s) for s in grid.split(","))
    out = Path(out_dir)
    variants = evalbench.ablate_opt_steps(
        x_base, x_sr, target_text, bundle, out / "sessions", steps_grid=steps_grid,
        etas=cfg["sweep"]["etas"], seed=seed, config=EditConfig.from_dict(cfg["edit"]))
    import csv as csv_mod

    with open(out / "opt_steps.csv", "w", newline="") as f:
        writer = csv_mod.writer(f)
        writer.writerow(["steps", "embed_distance"])
        for v in variants:
            writer.writerow([v.steps, f"{v.embed_distance:.6f}"])
            evalbench.write_sweep_csv(v.sweep, out / f"sweep_steps{v.steps}.csv")
    evalbench.plot_sweep({f"{v.steps} steps": v.sweep for v in variants},
                         out / "opt_steps.png", title="embedding optimization steps")
    for v in variants:
        click.echo(f"steps={v.steps}: distance to target embedding {v.embed_distance:.4f}")


@ablate.command("seeds")
@click.argument("session_dir")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--ckpt", "ckpt_dir", type=click.Path(), default=None)
@click.option("--seeds", type=str, default=None, help="Comma-separated seeds.")
def ablate_seeds_cmd(session_dir, config_path, overrides, out_dir, ckpt_dir, seeds):
    """Per-seed eta thresholds and failure-case flags for one session."""
    cfg = _load_cfg(config_path, overrides)
    from . import evalbench, pipeline

    bundle = _require_bundle(Path(ckpt_dir) if ckpt_dir else config_mod.data_root() / "checkpoints")
    session = pipeline.load_session(Path(session_dir))
    seed_list = ([int(s) for s in seeds.split(",")] if seeds
                 else list(session.config.seeds))
    reports = evalbench.ablate_seeds(session, cfg["sweep"]["etas"], seed_list, bundle)
    out = Path(out_dir)
    evalbench.write_seed_report_csv(reports, out / "seed_report.csv")
    for rep in reports:
        cross = "never" if rep.crossing_eta is None else f"eta={rep.crossing_eta}"
        flag = " FAILURE-CASE" if rep.collapse_before_crossing else ""
        click.echo(f"seed {rep.seed}: alignment crosses at {cross}{flag}")


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
def dataset(out_dir, config_path, overrides):
    """Export the procedural dataset as PNGs plus a manifest CSV."""
    cfg = _load_cfg(config_path, overrides)
    from . import sprites

    ds = sprites.generate_dataset(sprites.DatasetConfig(
        num_samples=cfg["dataset"]["num_samples"], resolution=cfg["dataset"]["resolution"],
        seed=cfg["dataset"]["seed"], holdout_fraction=cfg["dataset"]["holdout_fraction"]))
    manifest = sprites.export_dataset(ds, Path(out_dir))
    click.echo(f"wrote {len(ds)} sprites, manifest {manifest}")


@main.command()
@click.option("--port", type=int, default=8008)
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--ckpt", "ckpt_dir", type=click.Path(), default=None)
@click.option("--sessions", "sessions_dir", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
def serve(port, host, ckpt_dir, sessions_dir, config_path, overrides):
    """Serve the edit-exploration HTTP API."""
    cfg = _load_cfg(config_path, overrides)
    import uvicorn

    from .service.app import create_app

    ckpt = Path(ckpt_dir) if ckpt_dir else config_mod.data_root() / "checkpoints"
    sessions = Path(sessions_dir) if sessions_dir else config_mod.data_root() / "sessions"
    if not (Path(ckpt) / "manifest.txt").exists():
        click.echo(f"error: no pretrain manifest under {ckpt}", err=True)
        sys.exit(EXIT_MISSING_CHECKPOINTS)
    app = create_app(ckpt, sessions, cfg)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
