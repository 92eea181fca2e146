import { ApiClient, DeviceBusyError, ApiError } from "./api";
import type { PinStore } from "./pins";
import type { RenderMetrics, SessionDetail, SweepRow } from "./types";
import { FIDELITY_CEILING_DB } from "./types";

export const ETA_STEP = 0.05;
export const ETA_BAND = { lo: 0.6, hi: 0.8 }; // highlighted sweet spot
const DEBOUNCE_MS = 150;

export function metricsKey(eta: number, seed: number): string {
    return `${eta.toFixed(2)}|${seed}`;
}

export function metricsLookup(rows: RenderMetrics[]): Map<string, RenderMetrics> {
    const map = new Map<string, RenderMetrics>();
    for (const row of rows) map.set(metricsKey(row.eta, row.seed), row);
    return map;
}

export function fidelityAtCeiling(row: RenderMetrics): boolean {
    return row.fidelity_psnr >= 0.99 * FIDELITY_CEILING_DB;
}

interface CellState {
    seed: number;
    img: HTMLImageElement;
    badge: HTMLElement;
    pinButton: HTMLButtonElement;
    cell: HTMLElement;
    inFlight: boolean;
    pendingEta: number | null;
    shownEta: number | null;
}

export interface ExploreView {
    root: HTMLElement;
    setEta(eta: number): void;
    currentEta(): number;
    refresh(): Promise<void>;
    cells(): ReadonlyArray<{ seed: number; inFlight: boolean; shownEta: number | null }>;
    dispose(): void;
}

/**
 * Interactive eta/seed exploration grid.
 *
 * Every pixel shown comes from a service render response; the view keeps no
 * derived image state and can be rebuilt from GET endpoints alone. Slider
 * moves are debounced so each seed has at most one render request in flight,
 * with the newest eta queued behind it.
 */
export function createExploreView(opts: {
    root: HTMLElement;
    api: ApiClient;
    detail: SessionDetail;
    pins: PinStore;
    document?: Document;
}): ExploreView {
    const doc = opts.document ?? document;
    const { api, pins } = opts;
    let detail = opts.detail;
    const sessionId = detail.session_id;
    let metrics = metricsLookup(detail.metrics);
    let eta = snapEta(detail.default_eta);
    let debounceTimer: ReturnType<typeof setTimeout> | null = null;
    let disposed = false;

    const root = opts.root;
    root.classList.add("explore-view");
    root.innerHTML = "";

    const caption = doc.createElement("p");
    caption.className = "target-caption";
    caption.textContent = `target: ${detail.target_caption}`;
    root.appendChild(caption);

    // eta slider with the recommended band marked
    const sliderWrap = doc.createElement("div");
    sliderWrap.className = "eta-slider";
    const band = doc.createElement("span");
    band.className = "eta-band";
    band.style.left = `${ETA_BAND.lo * 100}%`;
    band.style.width = `${(ETA_BAND.hi - ETA_BAND.lo) * 100}%`;
    sliderWrap.appendChild(band);
    const slider = doc.createElement("input");
    slider.type = "range";
    slider.min = "0";
    slider.max = "1";
    slider.step = String(ETA_STEP);
    slider.value = String(eta);
    const sliderValue = doc.createElement("output");
    sliderValue.textContent = formatEta(eta);
    const sliderHint = doc.createElement("div");
    sliderHint.className = "slider-hint";
    sliderWrap.appendChild(slider);
    sliderWrap.appendChild(sliderValue);
    root.appendChild(sliderWrap);
    root.appendChild(sliderHint);

    // input/output wipe comparator for the pinned (or first) seed
    const comparator = doc.createElement("div");
    comparator.className = "comparator";
    const inputImg = doc.createElement("img");
    inputImg.className = "comparator-input";
    inputImg.alt = "input";
    inputImg.src = api.renderUrl(sessionId, 0, detail.seeds[0] ?? 0);
    const outputImg = doc.createElement("img");
    outputImg.className = "comparator-output";
    outputImg.alt = "edited";
    const wipe = doc.createElement("input");
    wipe.type = "range";
    wipe.min = "0";
    wipe.max = "100";
    wipe.value = "50";
    wipe.className = "wipe";
    wipe.addEventListener("input", () => {
        outputImg.style.clipPath = `inset(0 0 0 ${wipe.value}%)`;
    });
    comparator.append(inputImg, outputImg, wipe);
    root.appendChild(comparator);

    // sweep curve overlay with the current eta marked
    const sweepBox = doc.createElement("div");
    sweepBox.className = "sweep-overlay";
    root.appendChild(sweepBox);

    const grid = doc.createElement("div");
    grid.className = "seed-grid";
    root.appendChild(grid);

    const cells: CellState[] = detail.seeds.map((seed) => {
        const cell = doc.createElement("figure");
        cell.className = "seed-cell stale";
        cell.dataset.seed = String(seed);
        const img = doc.createElement("img");
        img.alt = `seed ${seed}`;
        const badge = doc.createElement("figcaption");
        badge.className = "badge";
        badge.textContent = "…";
        const pinButton = doc.createElement("button");
        pinButton.type = "button";
        pinButton.className = "pin";
        pinButton.textContent = "pin";
        pinButton.addEventListener("click", () => {
            pins.set(sessionId, { eta: shown(seed) ?? eta, seed });
            markPinned();
        });
        cell.append(img, badge, pinButton);
        grid.appendChild(cell);
        return { seed, img, badge, pinButton, cell, inFlight: false,
                 pendingEta: null, shownEta: null };
    });

    function shown(seed: number): number | null {
        return cells.find((c) => c.seed === seed)?.shownEta ?? null;
    }

    function markPinned(): void {
        const pin = pins.get(sessionId);
        for (const c of cells) {
            const isPinned = pin !== null && pin.seed === c.seed
                && (c.shownEta === null || Math.abs(pin.eta - c.shownEta) < 1e-9);
            c.cell.classList.toggle("pinned", isPinned);
        }
    }

    function updateBadge(c: CellState): void {
        const row = c.shownEta === null ? undefined
            : metrics.get(metricsKey(c.shownEta, c.seed));
        if (!row) {
            c.badge.textContent = "…";
            return;
        }
        c.badge.textContent =
            `align ${row.alignment.toFixed(2)} · psnr ${row.fidelity_psnr.toFixed(1)} dB`;
        c.badge.classList.toggle("ceiling", fidelityAtCeiling(row));
        c.badge.classList.toggle("recommended", row.recommended);
    }

    async function refreshMetrics(): Promise<void> {
        detail = await api.getSession(sessionId);
        metrics = metricsLookup(detail.metrics);
        for (const c of cells) updateBadge(c);
    }

    async function pump(c: CellState): Promise<void> {
        if (c.inFlight || c.pendingEta === null || disposed) return;
        const target = c.pendingEta;
        c.pendingEta = null;
        c.inFlight = true;
        c.cell.classList.add("stale");
        try {
            const blob = await api.fetchRender(sessionId, target, c.seed);
            if (disposed) return;
            const url = URL.createObjectURL(blob);
            if (c.img.src.startsWith("blob:")) URL.revokeObjectURL(c.img.src);
            c.img.src = url;
            c.shownEta = target;
            sliderHint.textContent = "";
            c.cell.classList.remove("stale");
        } catch (err) {
            if (err instanceof DeviceBusyError) {
                c.pendingEta = c.pendingEta ?? target;  // retry current target
                setTimeout(() => void pump(c), err.retryAfterSeconds * 1000);
            } else if (err instanceof ApiError && err.status === 422) {
                sliderHint.textContent = `service rejected eta=${formatEta(target)}: ${err.message}`;
            } else {
                sliderHint.textContent = String(err);
            }
        } finally {
            c.inFlight = false;
        }
        if (c.pendingEta !== null) void pump(c);
        else {
            void refreshMetrics().then(markPinned).catch(() => undefined);
        }
    }

    function requestRenders(): void {
        for (const c of cells) {
            if (c.shownEta === eta) continue;  // cached cell already showing it
            c.pendingEta = eta;
            void pump(c);
        }
        const pin = pins.get(sessionId);
        const focusSeed = pin?.seed ?? detail.seeds[0];
        outputImg.src = api.renderUrl(sessionId, pin?.eta ?? eta, focusSeed ?? 0);
    }

    function renderSweep(rows: SweepRow[]): void {
        if (!rows.length) return;
        const w = 220;
        const h = 60;
        const x = (e: number) => e * w;
        const fidMax = Math.max(...rows.map((r) => r.mean_fidelity), 1);
        const alignPts = rows.map((r) => `${x(r.eta)},${h - r.mean_alignment * h}`).join(" ");
        const fidPts = rows.map((r) => `${x(r.eta)},${h - (r.mean_fidelity / fidMax) * h}`).join(" ");
        sweepBox.innerHTML =
            `<svg viewBox="0 0 ${w} ${h}" class="sweep-svg">` +
            `<polyline class="curve-align" fill="none" points="${alignPts}"/>` +
            `<polyline class="curve-fid" fill="none" points="${fidPts}"/>` +
            `<line class="eta-marker" x1="${x(eta)}" x2="${x(eta)}" y1="0" y2="${h}"/>` +
            `</svg>`;
    }

    slider.addEventListener("input", () => {
        eta = snapEta(Number(slider.value));
        sliderValue.textContent = formatEta(eta);
        if (debounceTimer !== null) clearTimeout(debounceTimer);
        debounceTimer = setTimeout(() => {
            debounceTimer = null;
            requestRenders();
            void api.getSweep(sessionId).then(renderSweep).catch(() => undefined);
        }, DEBOUNCE_MS);
    });

    const view: ExploreView = {
        root,
        setEta(value: number): void {
            slider.value = String(snapEta(value));
            slider.dispatchEvent(new Event("input"));
        },
        currentEta: () => eta,
        async refresh(): Promise<void> {
            await refreshMetrics();
            requestRenders();
            markPinned();
            try {
                renderSweep(await api.getSweep(sessionId));
            } catch {
                /* sweep may 503 while the device is busy */
            }
        },
        cells: () => cells.map((c) => ({ seed: c.seed, inFlight: c.inFlight,
                                         shownEta: c.shownEta })),
        dispose(): void {
            disposed = true;
            if (debounceTimer !== null) clearTimeout(debounceTimer);
        },
    };
    markPinned();
    return view;
}

export function snapEta(value: number): number {
    const snapped = Math.round(value / ETA_STEP) * ETA_STEP;
    return Math.min(1, Math.max(0, Number(snapped.toFixed(2))));
}

export function formatEta(value: number): string {
    return value.toFixed(2).replace(/0+$/, "").replace(/\.$/, "") || "0";
}
