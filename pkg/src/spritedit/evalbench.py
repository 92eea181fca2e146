"""Sweeps, baselines, and ablations over edit sessions.

Everything here is read-only over the trained weights: rendering is delegated
to the session render cache, so sweeps are reproducible bit-for-bit under the
deterministic sampler and re-running a sweep is nearly free once the cache is
warm.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import imageio, pipeline, sprites
from .artifacts import PretrainedBundle
from .diffusion import SamplerConfig, forward_diffuse, sample
from .metrics import psnr
from .pipeline import EditConfig, EditSession, interpolate_embedding, render_base


@dataclass
class SweepRow:
    eta: float
    mean_alignment: float
    mean_fidelity: float
    n: int
    seeds: tuple[int, ...]


@dataclass
class DetailRow:
    session_id: str
    eta: float
    seed: int
    alignment: float
    fidelity: float


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    detail: list[DetailRow] = field(default_factory=list)

    def __post_init__(self):
        etas = [r.eta for r in self.rows]
        if etas != sorted(etas) or len(set(etas)) != len(etas):
            raise ValueError("sweep rows must have strictly increasing etas")
        if any(r.n <= 0 for r in self.rows):
            raise ValueError("every sweep row needs n > 0")

    def row(self, eta: float) -> SweepRow:
        for r in self.rows:
            if abs(r.eta - eta) < 1e-9:
                return r
        raise KeyError(f"no row for eta={eta}")

    @property
    def etas(self) -> list[float]:
        return [r.eta for r in self.rows]


def eta_sweep(sessions: list[EditSession], etas: list[float], seeds: list[int],
              bundle: PretrainedBundle) -> SweepResult:
    """Render every (session, eta, seed) and average alignment and fidelity.

    Alignment is scored against each session's target caption; fidelity is
    PSNR against its input image, both at base resolution. Sessions that have
    not finished stages A and B are skipped with a warning.
    """
    ready = []
    for s in sessions:
        if s.stage_a and s.stage_b:
            ready.append(s)
        else:
            warnings.warn(f"session {s.session_id} skipped: stages incomplete")
    if not ready:
        raise ValueError("no sessions with completed stages A and B")
    rows, detail = [], []
    for eta in sorted(etas):
        aligns, fids = [], []
        for s in ready:
            for seed in seeds:
                img = render_base(s, bundle, eta, seed)
                align = bundle.scorer.score(img, s.target_caption)
                fid = psnr(img, s.x_base)
                aligns.append(align)
                fids.append(fid)
                detail.append(DetailRow(s.session_id, eta, seed, align, fid))
        rows.append(SweepRow(eta=eta, mean_alignment=sum(aligns) / len(aligns),
                             mean_fidelity=sum(fids) / len(fids),
                             n=len(aligns), seeds=tuple(seeds)))
    return SweepResult(rows, detail)


def tradeoff_window(result: SweepResult, fraction: float = 0.8) -> tuple[float, float] | None:
    """Largest contiguous eta window keeping both metrics above ``fraction``
    of their best endpoint values (alignment at eta=1, fidelity at eta=0)."""
    align_ref = result.rows[-1].mean_alignment
    fid_ref = result.rows[0].mean_fidelity
    good = [r.eta for r in result.rows
            if r.mean_alignment >= fraction * align_ref and r.mean_fidelity >= fraction * fid_ref]
    if not good:
        return None
    etas = result.etas
    runs, current = [], [good[0]]
    for eta in good[1:]:
        if etas.index(eta) == etas.index(current[-1]) + 1:
            current.append(eta)
        else:
            runs.append(current)
            current = [eta]
    runs.append(current)
    best = max(runs, key=len)
    return best[0], best[-1]


def write_sweep_csv(result: SweepResult, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["eta", "mean_alignment", "mean_fidelity", "n", "seeds"])
        for r in result.rows:
            writer.writerow([pipeline.format_eta(r.eta), f"{r.mean_alignment:.6f}",
                             f"{r.mean_fidelity:.4f}", r.n,
                             " ".join(str(s) for s in r.seeds)])


def write_sweep_detail_csv(result: SweepResult, path: Path) -> None:
    """One row per rendered (session, eta, seed), before aggregation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["session_id", "eta", "seed", "alignment", "fidelity"])
        for d in result.detail:
            writer.writerow([d.session_id, pipeline.format_eta(d.eta), d.seed,
                             f"{d.alignment:.6f}", f"{d.fidelity:.4f}"])


def plot_sweep(results: dict[str, SweepResult], path: Path,
               title: str = "alignment and fidelity vs eta") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax2 = ax1.twinx()
    for label, result in results.items():
        etas = result.etas
        ax1.plot(etas, [r.mean_alignment for r in result.rows], marker="o",
                 label=f"{label} alignment")
        ax2.plot(etas, [r.mean_fidelity for r in result.rows], marker="s", linestyle="--",
                 label=f"{label} fidelity")
    ax1.set_xlabel("eta")
    ax1.set_ylabel("alignment (cosine)")
    ax2.set_ylabel("fidelity (PSNR dB)")
    ax1.set_title(title)
    lines1, labels1 = ax1.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax1.legend(lines1 + lines2, labels1 + labels2, fontsize=7, loc="lower center")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sdedit_baseline(x: torch.Tensor, target_caption: str, t0_fraction: float,
                    bundle: PretrainedBundle, seed: int,
                    config: EditConfig | None = None) -> torch.Tensor:
    """Noise the input to an intermediate step, then denoise toward the text.

    Uses the pretrained (never fine-tuned) denoiser with the same sampler
    settings as edits. Larger t0_fraction discards more of the input.
    """
    if not 0.0 < t0_fraction <= 1.0:
        raise ValueError(f"t0_fraction must be in (0, 1], got {t0_fraction}")
    config = config or EditConfig()
    t0 = int(round(t0_fraction * bundle.schedule.num_steps))
    rng = torch.Generator().manual_seed(seed)
    eps = torch.randn(x.shape, generator=rng)
    x_t0 = forward_diffuse(x, t0, eps, bundle.schedule)
    e = bundle.text.encode(target_caption).detach_clone()
    e_null = bundle.text.null_embedding().detach_clone()
    cfg = config.sampler_config(seed)
    with torch.no_grad():
        out = sample(bundle.base, e, e_null, cfg, bundle.schedule,
                     x_init=x_t0, t_init=t0)
    return imageio.quantize(out)


def render_with_model(session: EditSession, bundle: PretrainedBundle, model,
                      eta: float, seed: int) -> torch.Tensor:
    """Uncached render of a session's edit under an arbitrary denoiser.

    Used by the fine-tuning ablation to replay the exact same embedding,
    seed, and sampler through the pretrained weights.
    """
    e_bar = interpolate_embedding(session.e_tgt, session.e_opt, eta)
    e_null = bundle.text.null_embedding().detach_clone()
    cfg = session.config.sampler_config(seed)
    with torch.no_grad():
        img = sample(model, e_bar, e_null, cfg, bundle.schedule, shape=session.x_base.shape)
    return imageio.quantize(img)


@dataclass
class VariantRow:
    session_id: str
    variant: str
    eta: float
    alignment: float
    fidelity: float


def ablate_finetune(sessions: list[EditSession], etas: list[float], seed: int,
                    bundle: PretrainedBundle) -> tuple[dict[str, SweepResult], list[VariantRow]]:
    """Render the same (e_opt, eta, seed) grid under pretrained and fine-tuned
    weights; returns per-variant sweeps plus the per-session detail rows."""
    detail: list[VariantRow] = []
    per_variant: dict[str, list[SweepRow]] = {"pretrained": [], "finetuned": []}
    for eta in sorted(etas):
        stats = {"pretrained": ([], []), "finetuned": ([], [])}
        for s in sessions:
            if not (s.stage_a and s.stage_b):
                warnings.warn(f"session {s.session_id} skipped: stages incomplete")
                continue
            for variant, model in (("pretrained", bundle.base), ("finetuned", s.tuned_base)):
                img = (render_base(s, bundle, eta, seed) if variant == "finetuned"
                       else render_with_model(s, bundle, model, eta, seed))
                align = bundle.scorer.score(img, s.target_caption)
                fid = psnr(img, s.x_base)
                stats[variant][0].append(align)
                stats[variant][1].append(fid)
                detail.append(VariantRow(s.session_id, variant, eta, align, fid))
        for variant, (aligns, fids) in stats.items():
            per_variant[variant].append(SweepRow(
                eta=eta, mean_alignment=sum(aligns) / len(aligns),
                mean_fidelity=sum(fids) / len(fids), n=len(aligns), seeds=(seed,)))
    return ({v: SweepResult(rows) for v, rows in per_variant.items()}, detail)


@dataclass
class OptStepsVariant:
    steps: int
    session: EditSession
    embed_distance: float
    sweep: SweepResult


def ablate_opt_steps(x_base: torch.Tensor, x_sr: torch.Tensor, target_caption: str,
                     bundle: PretrainedBundle, workdir: Path,
                     steps_grid: tuple[int, ...] = (10, 100, 1000),
                     etas: list[float] | None = None, seed: int = 0,
                     config: EditConfig | None = None) -> list[OptStepsVariant]:
    """Run stage A at each step count (then B), and sweep each variant."""
    from .text import embedding_distance

    etas = etas if etas is not None else [round(0.1 * k, 1) for k in range(11)]
    base_cfg = config or EditConfig()
    out = []
    for steps in steps_grid:
        cfg = EditConfig(**{**base_cfg.__dict__, "embed_opt_steps": steps,
                            "seeds": (seed,)})
        session = pipeline.edit(bundle, x_base, x_sr, target_caption, cfg,
                                Path(workdir) / f"opt{steps}")
        dist = embedding_distance(session.e_opt, session.e_tgt)
        sweep = eta_sweep([session], etas, [seed], bundle)
        out.append(OptStepsVariant(steps=steps, session=session,
                                   embed_distance=dist, sweep=sweep))
    return out


def paired_bootstrap_ci(diffs: list[float], n_boot: int = 2000, seed: int = 0,
                        alpha: float = 0.05) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean of paired diffs."""
    gen = torch.Generator().manual_seed(seed)
    d = torch.tensor(diffs, dtype=torch.float64)
    idx = torch.randint(0, len(diffs), (n_boot, len(diffs)), generator=gen)
    means = d[idx].mean(dim=1).sort().values
    lo = float(means[int(alpha / 2 * n_boot)])
    hi = float(means[int((1 - alpha / 2) * n_boot) - 1])
    return lo, hi


@dataclass
class SeedReport:
    seed: int
    crossing_eta: float | None
    collapse_before_crossing: bool
    curve: list[tuple[float, float, float]]  # (eta, alignment, fidelity)


def ablate_seeds(session: EditSession, etas: list[float], seeds: list[int],
                 bundle: PretrainedBundle, align_fraction: float = 0.8,
                 collapse_fraction: float = 0.5) -> list[SeedReport]:
    """Per-seed sweep: where does each seed's alignment first cross the
    threshold, and does fidelity collapse before that?

    The threshold is align_fraction of that seed's alignment at eta=1; a
    collapse is a fidelity drop of more than collapse_fraction of the seed's
    full fidelity range occurring strictly before the crossing.
    """
    etas = sorted(etas)
    reports = []
    for seed in seeds:
        curve = []
        for eta in etas:
            img = render_base(session, bundle, eta, seed)
            curve.append((eta, bundle.scorer.score(img, session.target_caption),
                          psnr(img, session.x_base)))
        align_end = curve[-1][1]
        threshold = align_fraction * align_end
        crossing = next((eta for eta, a, _ in curve if a >= threshold), None)
        fid0 = curve[0][2]
        fid_min = min(f for _, _, f in curve)
        collapse_level = fid0 - collapse_fraction * (fid0 - fid_min)
        collapsed = False
        if crossing is not None and fid0 > fid_min:
            for eta, _, f in curve:
                if eta >= crossing:
                    break
                if f < collapse_level:
                    collapsed = True
                    break
        reports.append(SeedReport(seed=seed, crossing_eta=crossing,
                                  collapse_before_crossing=collapsed, curve=curve))
    return reports


def write_seed_report_csv(reports: list[SeedReport], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "eta", "alignment", "fidelity", "crossing_eta", "collapsed"])
        for rep in reports:
            for eta, a, fid in rep.curve:
                writer.writerow([rep.seed, pipeline.format_eta(eta), f"{a:.6f}", f"{fid:.4f}",
                                 "" if rep.crossing_eta is None else pipeline.format_eta(rep.crossing_eta),
                                 int(rep.collapse_before_crossing)])
