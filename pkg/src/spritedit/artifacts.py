"""Pretrained artifact management: the full training recipe and its loader.

A pretrain run produces one directory holding per-component checkpoints (base
denoiser, SR denoiser, text embedding table, alignment scorer, two oracle
resolutions) plus a run manifest tying their content hashes to the effective
config. Everything downstream (edits, sweeps, the service) loads the bundle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import torch

from . import checkpoint, config as config_mod, metrics, oracle as oracle_mod, sprites, sr
from .diffusion import train_model
from .metrics import AlignmentScorer
from .oracle import Oracle
from .schedule import DiffusionSchedule, make_schedule
from .text import TextEncoder, Vocabulary, default_vocabulary
from .unet import NoisePredictor, PredictorArch


def save_predictor(model: NoisePredictor, ckpt_dir: Path, schedule_cfg: dict,
                   extra: dict | None = None) -> dict:
    meta = {"kind": "predictor", "max_steps": model.max_steps}
    meta.update({f"arch.{k}": v for k, v in model.arch.describe().items()})
    meta.update({f"schedule.{k}": v for k, v in schedule_cfg.items()})
    meta.update(extra or {})
    return checkpoint.save_state(ckpt_dir, dict(model.state_dict()), meta)


def load_predictor(ckpt_dir: Path) -> tuple[NoisePredictor, dict]:
    manifest, state = checkpoint.load_state(ckpt_dir)
    arch = PredictorArch.from_description(
        {k[len("arch."):]: v for k, v in manifest.items() if k.startswith("arch.")}
    )
    model = NoisePredictor(arch, max_steps=int(manifest["max_steps"]))
    model.load_state_dict(state)
    return model, manifest


def save_text_encoder(encoder: TextEncoder, ckpt_dir: Path, extra: dict | None = None) -> dict:
    meta = {"kind": "text", "token_count": encoder.token_count, "dim": encoder.dim}
    meta.update(extra or {})
    entries = checkpoint.save_state(ckpt_dir, dict(encoder.state_dict()), meta)
    encoder.vocab.save(Path(ckpt_dir) / "vocab.txt")
    return entries


def load_text_encoder(ckpt_dir: Path) -> TextEncoder:
    manifest, state = checkpoint.load_state(ckpt_dir)
    vocab = Vocabulary.load(Path(ckpt_dir) / "vocab.txt")
    encoder = TextEncoder(vocab, dim=int(manifest["dim"]), token_count=int(manifest["token_count"]))
    encoder.load_state_dict(state)
    return encoder


@dataclass
class PretrainedBundle:
    root: Path
    cfg: dict
    schedule: DiffusionSchedule
    text: TextEncoder
    base: NoisePredictor
    sr: NoisePredictor
    scorer: AlignmentScorer
    oracle16: Oracle
    oracle32: Oracle

    def base_hash(self) -> str:
        return checkpoint.module_hash(self.base)

    def sr_hash(self) -> str:
        return checkpoint.module_hash(self.sr)

    def freeze(self) -> None:
        for module in (self.base, self.sr, self.text):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)


def pretrain(cfg: dict, out_dir: Path, log=print) -> PretrainedBundle:
    """Run the full desk-scale training recipe and persist every component."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.time()

    dataset = sprites.generate_dataset(sprites.DatasetConfig(
        num_samples=cfg["dataset"]["num_samples"], resolution=cfg["dataset"]["resolution"],
        seed=cfg["dataset"]["seed"], holdout_fraction=cfg["dataset"]["holdout_fraction"]))
    schedule = make_schedule(cfg["schedule"]["num_steps"], cfg["schedule"]["shape"])
    vocab = default_vocabulary()
    text = TextEncoder(vocab, dim=cfg["model"]["cond_dim"],
                       token_count=cfg["model"]["token_count"], seed=cfg["model"]["seed"])

    arch = PredictorArch(resolution=cfg["dataset"]["resolution"],
                         base_channels=cfg["model"]["base_channels"],
                         cond_dim=cfg["model"]["cond_dim"], time_dim=cfg["model"]["time_dim"],
                         attn_heads=cfg["model"]["attn_heads"])
    base = NoisePredictor(arch, max_steps=schedule.num_steps, seed=cfg["model"]["seed"])
    log(f"[pretrain] base denoiser: {cfg['pretrain']['steps']} steps")
    train_model(dataset, base, text, schedule, steps=cfg["pretrain"]["steps"],
                lr=cfg["pretrain"]["lr"], cond_drop_prob=cfg["pretrain"]["cond_drop_prob"],
                batch_size=cfg["pretrain"]["batch_size"], seed=cfg["pretrain"]["seed"],
                lr_schedule=cfg["pretrain"].get("lr_schedule", "constant"),
                log_path=out_dir / "base" / "loss.csv")

    sr_model = NoisePredictor(sr.sr_arch(cfg["model"]["base_channels"], cfg["model"]["cond_dim"]),
                              max_steps=schedule.num_steps, seed=cfg["model"]["seed"] + 1)
    log(f"[pretrain] SR denoiser: {cfg['sr_train']['steps']} steps")
    sr.train_sr(dataset, sr_model, text, schedule, steps=cfg["sr_train"]["steps"],
                lr=cfg["sr_train"]["lr"], batch_size=cfg["sr_train"]["batch_size"],
                seed=cfg["sr_train"]["seed"], log_path=out_dir / "sr" / "loss.csv",
                cond_drop_prob=cfg["sr_train"]["cond_drop_prob"],
                lr_schedule=cfg["sr_train"].get("lr_schedule", "constant"))

    log(f"[pretrain] alignment scorer: {cfg['scorer']['steps']} steps")
    scorer = metrics.train_scorer(dataset, steps=cfg["scorer"]["steps"],
                                  batch_size=cfg["scorer"]["batch_size"],
                                  lr=cfg["scorer"]["lr"], seed=cfg["scorer"]["seed"],
                                  vocab=vocab, accuracy_floor=cfg["scorer"]["accuracy_floor"])

    oracles = {}
    for res in (sprites.BASE_RES, sprites.SR_RES):
        log(f"[pretrain] oracle classifier at {res}px: {cfg['oracle']['steps']} steps")
        oracles[res] = oracle_mod.train_oracle(
            resolution=res, steps=cfg["oracle"]["steps"], batch_size=cfg["oracle"]["batch_size"],
            lr=cfg["oracle"]["lr"], seed=cfg["oracle"]["seed"],
            label_smoothing=cfg["oracle"]["label_smoothing"])

    schedule_cfg = dict(cfg["schedule"])
    dataset_hash = dataset.content_hash()
    base_entries = save_predictor(base, out_dir / "base", schedule_cfg,
                                  extra={"train.steps": cfg["pretrain"]["steps"],
                                         "train.lr": cfg["pretrain"]["lr"],
                                         "train.cond_drop_prob": cfg["pretrain"]["cond_drop_prob"],
                                         "dataset.hash": dataset_hash})
    base_hash = checkpoint.state_hash(dict(base.state_dict()))
    save_predictor(sr_model, out_dir / "sr", schedule_cfg,
                   extra={"train.steps": cfg["sr_train"]["steps"],
                          "train.lr": cfg["sr_train"]["lr"],
                          "paired_base_hash": base_hash,
                          "dataset.hash": dataset_hash})
    save_text_encoder(text, out_dir / "text")
    metrics.save_scorer(scorer, out_dir / "scorer", extra={"train.steps": cfg["scorer"]["steps"]})
    oracle_mod.save_oracle(oracles[16], out_dir / "oracle16", extra={"train.steps": cfg["oracle"]["steps"]})
    oracle_mod.save_oracle(oracles[32], out_dir / "oracle32", extra={"train.steps": cfg["oracle"]["steps"]})

    config_mod.dump_yaml(cfg, out_dir / "config.yaml")
    run_entries = {f"config.{k}": v for k, v in config_mod.flatten(cfg).items()}
    run_entries["dataset.hash"] = dataset_hash
    run_entries["elapsed_seconds"] = round(time.time() - t_start, 1)
    for name in ("base", "sr", "text", "scorer", "oracle16", "oracle32"):
        _, state = checkpoint.load_state(out_dir / name)
        run_entries[f"component.{name}"] = checkpoint.state_hash(state)
    checkpoint.write_manifest(out_dir / "manifest.txt", run_entries)
    log(f"[pretrain] done in {run_entries['elapsed_seconds']}s -> {out_dir}")
    return load_bundle(out_dir)


def load_bundle(root: Path) -> PretrainedBundle:
    root = Path(root)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"no pretrain manifest under {root}")
    import yaml

    cfg = yaml.safe_load((root / "config.yaml").read_text(encoding="utf-8"))
    base, base_manifest = load_predictor(root / "base")
    sr_model, _ = load_predictor(root / "sr")
    schedule = make_schedule(int(base_manifest["schedule.num_steps"]),
                             base_manifest["schedule.shape"])
    bundle = PretrainedBundle(
        root=root, cfg=cfg, schedule=schedule,
        text=load_text_encoder(root / "text"),
        base=base, sr=sr_model,
        scorer=metrics.load_scorer(root / "scorer"),
        oracle16=oracle_mod.load_oracle(root / "oracle16"),
        oracle32=oracle_mod.load_oracle(root / "oracle32"),
    )
    bundle.freeze()
    return bundle
