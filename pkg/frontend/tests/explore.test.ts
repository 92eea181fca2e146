// @vitest-environment jsdom
import { beforeEach, describe, expect, it, vi } from "vitest";

import { ApiClient } from "../src/api";
import { createExploreView, fidelityAtCeiling, formatEta, snapEta } from "../src/explore";
import { createPinStore } from "../src/pins";
import { FIDELITY_CEILING_DB } from "../src/types";
import { makeDetail, metricsRow, stubService } from "./stub";

function freshRoot(): HTMLElement {
    const root = document.createElement("div");
    document.body.appendChild(root);
    return root;
}

beforeEach(() => {
    document.body.innerHTML = "";
    window.localStorage.clear();
    if (!URL.createObjectURL) {
        URL.createObjectURL = () => `blob:stub-${Math.random()}`;
        URL.revokeObjectURL = () => undefined;
    }
});

describe("explore view", () => {
    it("renders one grid cell per seed, entirely from service data", () => {
        const stub = stubService();
        const api = new ApiClient("", stub.fetchFn);
        const pins = createPinStore(window.localStorage);
        const view = createExploreView({ root: freshRoot(), api, detail: stub.detail, pins });
        const cells = view.root.querySelectorAll(".seed-cell");
        expect(cells.length).toBe(5);
        expect([...cells].map((c) => (c as HTMLElement).dataset.seed))
            .toEqual(["0", "1", "2", "3", "4"]);
        view.dispose();
    });

    it("shows the fidelity badge at ceiling for the eta=0 reconstruction cell", async () => {
        const detail = makeDetail({
            metrics: [metricsRow({ eta: 0, seed: 0, fidelity_psnr: FIDELITY_CEILING_DB })],
        });
        const stub = stubService({ detail });
        const api = new ApiClient("", stub.fetchFn);
        const pins = createPinStore(window.localStorage);
        const view = createExploreView({ root: freshRoot(), api, detail, pins });
        view.setEta(0);
        await vi.waitFor(() => {
            const badge = view.root.querySelector('.seed-cell[data-seed="0"] .badge')!;
            expect(badge.classList.contains("ceiling")).toBe(true);
            expect(badge.textContent).toContain("60.0 dB");
        });
        view.dispose();
    });

    it("debounces slider moves to at most one in-flight render per seed", async () => {
        const stub = stubService({ renderDelayMs: 30 });
        const api = new ApiClient("", stub.fetchFn);
        const pins = createPinStore(window.localStorage);
        const view = createExploreView({ root: freshRoot(), api, detail: stub.detail, pins });
        view.setEta(0.3);
        view.setEta(0.4);
        view.setEta(0.5);  // only the last survives the debounce window
        await vi.waitFor(() => {
            expect(view.cells().every((c) => !c.inFlight && c.shownEta === 0.5)).toBe(true);
        });
        const perSeed = new Map<string, number>();
        for (const call of stub.renderCalls) {
            const seed = new URL(call, "http://x").searchParams.get("seed")!;
            perSeed.set(seed, (perSeed.get(seed) ?? 0) + 1);
        }
        expect(stub.stats().maxInFlight).toBeLessThanOrEqual(5);
        for (const [, count] of perSeed) expect(count).toBe(1);
        view.dispose();
    });

    it("pinned selection survives a reload of the view", async () => {
        const stub = stubService();
        const api = new ApiClient("", stub.fetchFn);
        const pins = createPinStore(window.localStorage);
        const root = freshRoot();
        const view = createExploreView({ root, api, detail: stub.detail, pins });
        view.setEta(0.6);
        await vi.waitFor(() => {
            expect(view.cells().find((c) => c.seed === 2)?.shownEta).toBe(0.6);
        });
        (root.querySelector('.seed-cell[data-seed="2"] .pin') as HTMLButtonElement).click();
        expect(pins.get("abc123")).toEqual({ eta: 0.6, seed: 2 });
        view.dispose();

        // simulate reload: fresh DOM + fresh view over the same storage
        const rebuilt = createExploreView({
            root: freshRoot(), api, detail: stub.detail,
            pins: createPinStore(window.localStorage),
        });
        const pinned = rebuilt.root.querySelector(".seed-cell.pinned") as HTMLElement;
        expect(pinned?.dataset.seed).toBe("2");
        rebuilt.dispose();
    });

    it("surfaces a 422 as a slider-range hint", async () => {
        const stub = stubService({ failRender: { status: 422, detail: "eta must be in [0, 1]" } });
        const api = new ApiClient("", stub.fetchFn);
        const pins = createPinStore(window.localStorage);
        const view = createExploreView({ root: freshRoot(), api, detail: stub.detail, pins });
        view.setEta(0.9);
        await vi.waitFor(() => {
            const hint = view.root.querySelector(".slider-hint")!;
            expect(hint.textContent).toContain("eta must be in [0, 1]");
        });
        view.dispose();
    });
});

describe("eta helpers", () => {
    it("snaps to the 0.05 grid inside [0, 1]", () => {
        expect(snapEta(0.72)).toBe(0.7);
        expect(snapEta(-0.2)).toBe(0);
        expect(snapEta(1.2)).toBe(1);
    });

    it("formats without trailing zeros", () => {
        expect(formatEta(0.7)).toBe("0.7");
        expect(formatEta(0)).toBe("0");
        expect(formatEta(0.65)).toBe("0.65");
    });

    it("detects the fidelity ceiling", () => {
        expect(fidelityAtCeiling(metricsRow({ fidelity_psnr: 60 }))).toBe(true);
        expect(fidelityAtCeiling(metricsRow({ fidelity_psnr: 30 }))).toBe(false);
    });
});
