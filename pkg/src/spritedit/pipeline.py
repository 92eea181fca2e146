"""The three-stage edit method and its persisted session artifact.

Stage A optimizes the target text embedding, with the denoiser frozen, until
it reconstructs the input image; Stage B fine-tunes the base denoiser at the
optimized embedding (and, in parallel, the SR denoiser at the target
embedding); Stage C interpolates the two embeddings and renders the edit.

A session directory persists everything one run produces: inputs, both
embeddings, fine-tuned checkpoints, a render cache keyed by (eta, seed), and
per-render metrics. Renders are canonical PNG bytes: the float image is
quantized on write and every caller gets the decoded bytes back, so repeated
renders, CLI renders, and service renders are all bit-identical.
"""

from __future__ import annotations

import csv
import json
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import checkpoint, imageio, sprites, sr as sr_mod
from .artifacts import PretrainedBundle, load_predictor, save_predictor
from .diffusion import SamplerConfig, denoising_loss, forward_diffuse, sample
from .errors import IntegrityError, StageIncompleteError
from .metrics import psnr
from .schedule import DiffusionSchedule
from .text import EmbeddingSequence, default_vocabulary, tokenize
from .unet import NoisePredictor


@dataclass(frozen=True)
class EditConfig:
    embed_opt_steps: int = 100
    embed_lr: float = 1.0e-3
    embed_batch: int = 8
    finetune_steps: int = 1500
    finetune_lr: float = 1.0e-4
    finetune_batch: int = 4
    sr_finetune_batch: int = 2
    eta: float = 0.7
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    guidance: float = 3.0
    sampler: str = "ddim"
    inference_steps: int = 50
    validation_pairs: int = 64
    rec_psnr_floor: float = 18.0
    session_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.embed_opt_steps < 0:
            raise ValueError("embed_opt_steps must be >= 0")

    @staticmethod
    def from_dict(d: dict) -> "EditConfig":
        known = {f: d[f] for f in EditConfig.__dataclass_fields__ if f in d}
        if "seeds" in known:
            known["seeds"] = tuple(int(s) for s in known["seeds"])
        return EditConfig(**known)

    def sampler_config(self, seed: int) -> SamplerConfig:
        return SamplerConfig(method=self.sampler, num_inference_steps=self.inference_steps,
                             guidance_weight=self.guidance, seed=seed)


def format_eta(eta: float) -> str:
    text = f"{eta:.4f}".rstrip("0").rstrip(".")
    return text if text else "0"


def interpolate_embedding(e_tgt: EmbeddingSequence, e_opt: EmbeddingSequence,
                          eta: float) -> EmbeddingSequence:
    """Linear interpolation eta * e_tgt + (1 - eta) * e_opt, elementwise."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if e_tgt.matrix.shape != e_opt.matrix.shape:
        raise ValueError("embedding shapes differ")
    matrix = eta * e_tgt.matrix.detach() + (1.0 - eta) * e_opt.matrix.detach()
    return EmbeddingSequence(matrix, e_tgt.mask.clone())


def validation_pairs(shape: tuple[int, ...], schedule: DiffusionSchedule, n: int,
                     seed: int) -> list[tuple[int, torch.Tensor]]:
    """Pre-drawn (t, eps) pairs so loss comparisons see identical noise."""
    rng = torch.Generator().manual_seed(seed)
    ts = torch.randint(1, schedule.num_steps + 1, (n,), generator=rng)
    return [(int(t), torch.randn(shape, generator=rng)) for t in ts]


def fixed_loss(model, x: torch.Tensor, e: EmbeddingSequence,
               pairs: list[tuple[int, torch.Tensor]], schedule: DiffusionSchedule) -> float:
    """Denoising objective evaluated on frozen (t, eps) pairs."""
    total = 0.0
    with torch.no_grad():
        for t, eps in pairs:
            xt = forward_diffuse(x, t, eps, schedule)
            pred = model(xt[None], torch.tensor([t]), e.matrix[None], e.mask[None])[0]
            total += float(((pred - eps) ** 2).mean())
    return total / len(pairs)


def optimize_embedding(x: torch.Tensor, e_tgt: EmbeddingSequence, model: NoisePredictor,
                       schedule: DiffusionSchedule, config: EditConfig) -> EmbeddingSequence:
    """Stage A: Adam on the embedding matrix alone, denoiser frozen.

    Runs deliberately few steps so the result stays near the target embedding;
    that proximity is what makes the later interpolation meaningful.
    """
    matrix = e_tgt.matrix.detach().clone().requires_grad_(True)
    e = EmbeddingSequence(matrix, e_tgt.mask.clone())
    if config.embed_opt_steps == 0:
        return EmbeddingSequence(matrix.detach(), e.mask)
    was_training = model.training
    model.eval()
    frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam([matrix], lr=config.embed_lr)
    rng = torch.Generator().manual_seed(config.session_seed)
    last_finite = matrix.detach().clone()
    for _ in range(config.embed_opt_steps):
        loss = denoising_loss(x, e, model, schedule, rng, batch_size=config.embed_batch)
        if not torch.isfinite(loss):
            matrix.data.copy_(last_finite)
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        if torch.isfinite(matrix).all():
            last_finite = matrix.detach().clone()
        else:
            matrix.data.copy_(last_finite)
            break
    for p, r in zip(model.parameters(), frozen):
        p.requires_grad_(r)
    model.train(was_training)
    return EmbeddingSequence(matrix.detach(), e.mask)


def finetune_base(x: torch.Tensor, e_opt: EmbeddingSequence, model: NoisePredictor,
                  schedule: DiffusionSchedule, config: EditConfig,
                  snapshot_every: int = 250) -> NoisePredictor:
    """Stage B, base half: shift the denoiser to fit x at the frozen e_opt."""
    tuned = model.clone()
    if config.finetune_steps == 0:
        return tuned
    tuned.train()
    e = e_opt.detach_clone()
    opt = torch.optim.Adam(tuned.parameters(), lr=config.finetune_lr)
    rng = torch.Generator().manual_seed(config.session_seed + 1)
    snapshot = None
    for step in range(config.finetune_steps):
        if snapshot_every and step % snapshot_every == 0:
            snapshot = {k: v.clone() for k, v in tuned.state_dict().items()}
        loss = denoising_loss(x, e, tuned, schedule, rng, batch_size=config.finetune_batch)
        if not torch.isfinite(loss):
            if snapshot is not None:
                tuned.load_state_dict(snapshot)
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    tuned.eval()
    return tuned


def finetune_sr(x_sr: torch.Tensor, e_tgt: EmbeddingSequence, sr_model: NoisePredictor,
                schedule: DiffusionSchedule, config: EditConfig) -> NoisePredictor:
    """Stage B, SR half: reconstruct x_sr from its own downsample, conditioned
    on the target embedding (not the optimized one)."""
    return sr_mod.finetune_sr_single(x_sr, e_tgt, sr_model, schedule,
                                     steps=config.finetune_steps, lr=config.finetune_lr,
                                     batch_size=config.sr_finetune_batch,
                                     seed=config.session_seed + 2)


@dataclass
class EditSession:
    root: Path
    session_id: str
    target_caption: str
    x_base: torch.Tensor
    x_sr: torch.Tensor
    config: EditConfig
    e_tgt: EmbeddingSequence
    e_opt: EmbeddingSequence | None = None
    tuned_base: NoisePredictor | None = None
    tuned_sr: NoisePredictor | None = None
    stage_a: bool = False
    stage_b: bool = False
    stage_c: bool = False
    pretrained_root: str = ""
    pretrained_base_hash: str = ""
    pretrained_sr_hash: str = ""
    schedule_cfg: dict = field(default_factory=dict)

    # -- stage transitions ---------------------------------------------------

    def mark_a(self, e_opt: EmbeddingSequence) -> None:
        self.e_opt = e_opt
        self.stage_a = True

    def mark_b(self, tuned_base: NoisePredictor, tuned_sr: NoisePredictor) -> None:
        if not self.stage_a:
            raise StageIncompleteError("stage B requires stage A")
        self.tuned_base = tuned_base
        self.tuned_sr = tuned_sr
        self.stage_b = True

    def mark_c(self) -> None:
        if not self.stage_b:
            raise StageIncompleteError("stage C requires stage B")
        self.stage_c = True

    # -- render cache ---------------------------------------------------------

    def render_path(self, eta: float, seed: int, base: bool = False) -> Path:
        name = f"eta{format_eta(eta)}_seed{seed}.png"
        return self.root / ("renders_base" if base else "renders") / name

    def cached_render(self, eta: float, seed: int, base: bool = False) -> torch.Tensor | None:
        path = self.render_path(eta, seed, base=base)
        return imageio.load_png(path) if path.exists() else None

    def metrics_rows(self) -> list[dict]:
        path = self.root / "metrics.csv"
        if not path.exists():
            return []
        with open(path, newline="") as f:
            return list(csv.DictReader(f))

    # -- persistence ----------------------------------------------------------

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        entries = {
            "session_id": self.session_id,
            "target_caption": self.target_caption,
            "stage.a": self.stage_a,
            "stage.b": self.stage_b,
            "stage.c": self.stage_c,
            "pretrained.root": self.pretrained_root,
            "pretrained.base_hash": self.pretrained_base_hash,
            "pretrained.sr_hash": self.pretrained_sr_hash,
            "config.json": json.dumps(_config_dict(self.config), sort_keys=True),
        }
        for k, v in self.schedule_cfg.items():
            entries[f"schedule.{k}"] = v
        imageio.save_png(self.x_base, self.root / "input_base.png")
        imageio.save_png(self.x_sr, self.root / "input_sr.png")
        entries["png.input_base"] = _sha256_file(self.root / "input_base.png")
        entries["png.input_sr"] = _sha256_file(self.root / "input_sr.png")
        entries["blob.e_tgt"] = checkpoint.write_blob(self.root / "e_tgt.bin",
                                                      self.e_tgt.matrix)
        if self.e_opt is not None:
            entries["blob.e_opt"] = checkpoint.write_blob(self.root / "e_opt.bin",
                                                          self.e_opt.matrix)
        if self.tuned_base is not None:
            save_predictor(self.tuned_base, self.root / "finetuned_base", self.schedule_cfg)
        if self.tuned_sr is not None:
            save_predictor(self.tuned_sr, self.root / "finetuned_sr", self.schedule_cfg)
        (self.root / "renders").mkdir(exist_ok=True)
        (self.root / "renders_base").mkdir(exist_ok=True)
        checkpoint.write_manifest(self.root / "manifest.txt", entries)


def _config_dict(config: EditConfig) -> dict:
    d = dict(config.__dict__)
    d["seeds"] = list(config.seeds)
    return d


def _sha256_file(path: Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_session(root: Path) -> EditSession:
    """Rebuild a session from disk, verifying blob and input-image integrity."""
    root = Path(root)
    manifest = checkpoint.read_manifest(root / "manifest.txt")
    config = EditConfig.from_dict(json.loads(manifest["config.json"]))
    caption = manifest["target_caption"]
    for key, name in (("png.input_base", "input_base.png"), ("png.input_sr", "input_sr.png")):
        if key in manifest and _sha256_file(root / name) != manifest[key]:
            raise IntegrityError(f"input image {name} hash mismatch")
    x_base = imageio.load_png(root / "input_base.png")
    x_sr = imageio.load_png(root / "input_sr.png")
    e_tgt_matrix = checkpoint.read_blob(root / "e_tgt.bin", expected_sha=manifest["blob.e_tgt"])
    token_count = e_tgt_matrix.shape[0]
    vocab = default_vocabulary()
    ids = tokenize(caption, vocab, token_count)
    mask = torch.tensor([i != vocab.pad_id for i in ids])
    session = EditSession(
        root=root, session_id=manifest["session_id"], target_caption=caption,
        x_base=x_base, x_sr=x_sr, config=config,
        e_tgt=EmbeddingSequence(e_tgt_matrix, mask),
        pretrained_root=manifest.get("pretrained.root", ""),
        pretrained_base_hash=manifest.get("pretrained.base_hash", ""),
        pretrained_sr_hash=manifest.get("pretrained.sr_hash", ""),
        schedule_cfg={k[len("schedule."):]: v for k, v in manifest.items()
                      if k.startswith("schedule.")},
    )
    if manifest.get("stage.a") == "True":
        e_opt_matrix = checkpoint.read_blob(root / "e_opt.bin",
                                            expected_sha=manifest["blob.e_opt"])
        session.e_opt = EmbeddingSequence(e_opt_matrix, mask.clone())
        session.stage_a = True
    if manifest.get("stage.b") == "True":
        session.tuned_base, _ = load_predictor(root / "finetuned_base")
        session.tuned_sr, _ = load_predictor(root / "finetuned_sr")
        session.stage_b = True
    if manifest.get("stage.c") == "True":
        session.stage_c = True
    return session


def create_session(bundle: PretrainedBundle, x_base: torch.Tensor, x_sr: torch.Tensor,
                   target_caption: str, config: EditConfig, parent: Path,
                   session_id: str | None = None) -> EditSession:
    """Snap inputs onto the PNG grid and persist the empty session.

    The directory materializes under ``parent/<session_id>`` via an atomic
    rename, so observers never see a half-written session.
    """
    sid = session_id or uuid.uuid4().hex[:12]
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    tmp_root = parent / f".tmp-{sid}"
    if tmp_root.exists():
        import shutil

        shutil.rmtree(tmp_root)
    session = EditSession(
        root=tmp_root, session_id=sid, target_caption=target_caption,
        x_base=imageio.quantize(x_base), x_sr=imageio.quantize(x_sr),
        config=config, e_tgt=bundle.text.encode(target_caption).detach_clone(),
        pretrained_root=str(bundle.root),
        pretrained_base_hash=bundle.base_hash(),
        pretrained_sr_hash=bundle.sr_hash(),
        schedule_cfg=dict(bundle.cfg["schedule"]),
    )
    session.save()
    final_root = parent / sid
    tmp_root.replace(final_root)
    session.root = final_root
    return session


def run_stage_a(session: EditSession, bundle: PretrainedBundle) -> None:
    e_opt = optimize_embedding(session.x_base, session.e_tgt, bundle.base,
                               bundle.schedule, session.config)
    session.mark_a(e_opt)
    session.save()


def run_stage_b(session: EditSession, bundle: PretrainedBundle,
                concurrent: bool = True) -> None:
    if not session.stage_a:
        raise StageIncompleteError("stage B requires stage A")
    args_base = (session.x_base, session.e_opt, bundle.base, bundle.schedule, session.config)
    args_sr = (session.x_sr, session.e_tgt, bundle.sr, bundle.schedule, session.config)
    if concurrent:
        # disjoint parameter sets, so the two fine-tunes can share the wall clock
        with ThreadPoolExecutor(max_workers=2) as pool:
            fut_base = pool.submit(finetune_base, *args_base)
            fut_sr = pool.submit(finetune_sr, *args_sr)
            tuned_base, tuned_sr = fut_base.result(), fut_sr.result()
    else:
        tuned_base = finetune_base(*args_base)
        tuned_sr = finetune_sr(*args_sr)
    session.mark_b(tuned_base, tuned_sr)
    session.save()


def render_base(session: EditSession, bundle: PretrainedBundle, eta: float,
                seed: int) -> torch.Tensor:
    """Render (or fetch) the base-resolution edit at (eta, seed).

    The fine-tuned denoiser is conditioned on the interpolated embedding, with
    classifier-free guidance against the pretrained null embedding. The result
    is quantized, cached as PNG, and scored into metrics.csv exactly once.
    """
    if not (session.stage_a and session.stage_b):
        raise StageIncompleteError("rendering requires stages A and B")
    cached = session.cached_render(eta, seed, base=True)
    if cached is not None:
        return cached
    e_bar = interpolate_embedding(session.e_tgt, session.e_opt, eta)
    e_null = bundle.text.null_embedding().detach_clone()
    cfg = session.config.sampler_config(seed)
    with torch.no_grad():
        img = sample(session.tuned_base, e_bar, e_null, cfg, bundle.schedule,
                     shape=session.x_base.shape)
    img = imageio.quantize(img)
    imageio.save_png(img, session.render_path(eta, seed, base=True))
    _append_metrics(session, bundle, eta, seed)
    return session.cached_render(eta, seed, base=True)


def generate_edit(session: EditSession, bundle: PretrainedBundle, eta: float,
                  seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Render the edit at (eta, seed); returns (SR image, base intermediate).

    The SR stage is conditioned on the target embedding (not the interpolated
    one) and on the base-resolution intermediate. Cache hits return the stored
    bytes unchanged.
    """
    base_img = render_base(session, bundle, eta, seed)
    cached_sr = session.cached_render(eta, seed)
    if cached_sr is not None:
        return cached_sr, base_img
    sr_cfg = SamplerConfig(method=session.config.sampler,
                           num_inference_steps=session.config.inference_steps,
                           guidance_weight=1.0, seed=seed)
    with torch.no_grad():
        sr_img = sr_mod.sr_sample(base_img, session.e_tgt, session.tuned_sr, sr_cfg,
                                  bundle.schedule)
    imageio.save_png(sr_img, session.render_path(eta, seed))
    return session.cached_render(eta, seed), base_img


_metrics_lock = threading.Lock()  # metrics.csv appends may race across render threads


def _append_metrics(session: EditSession, bundle: PretrainedBundle, eta: float,
                    seed: int) -> None:
    base_img = session.cached_render(eta, seed, base=True)
    alignment = bundle.scorer.score(base_img, session.target_caption)
    fidelity = psnr(base_img, session.x_base)
    oracle_spec = bundle.oracle16.classify(base_img).spec
    path = session.root / "metrics.csv"
    with _metrics_lock:
        new = not path.exists()
        with open(path, "a", newline="") as f:
            writer = csv.writer(f)
            if new:
                writer.writerow(["eta", "seed", "alignment", "fidelity_psnr",
                                 "oracle_caption", "recommended"])
            writer.writerow([format_eta(eta), seed, f"{alignment:.6f}", f"{fidelity:.4f}",
                             sprites.caption_of(oracle_spec), 0])


def recommend_render(session: EditSession) -> dict | None:
    """Mark the render with the best alignment whose fidelity clears the floor."""
    rows = session.metrics_rows()
    if not rows:
        return None
    eligible = [r for r in rows if float(r["fidelity_psnr"]) >= session.config.rec_psnr_floor]
    pool = eligible or rows
    best = max(pool, key=lambda r: float(r["alignment"]))
    for r in rows:
        r["recommended"] = "1" if r is best else "0"
    path = session.root / "metrics.csv"
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return best


def run_stage_c(session: EditSession, bundle: PretrainedBundle) -> None:
    if not session.stage_b:
        raise StageIncompleteError("stage C requires stage B")
    for seed in session.config.seeds:
        generate_edit(session, bundle, session.config.eta, seed)
    recommend_render(session)
    session.mark_c()
    session.save()


def edit(bundle: PretrainedBundle, x_base: torch.Tensor, x_sr: torch.Tensor,
         target_caption: str, config: EditConfig, session_root: Path,
         session_id: str | None = None, concurrent_finetunes: bool = True) -> EditSession:
    """Full pipeline: create the session, then stages A, B, and C in order."""
    session = create_session(bundle, x_base, x_sr, target_caption, config,
                             session_root, session_id=session_id)
    run_stage_a(session, bundle)
    run_stage_b(session, bundle, concurrent=concurrent_finetunes)
    run_stage_c(session, bundle)
    return session
