import { describe, expect, it } from "vitest";

import { ApiClient, ApiError, DeviceBusyError } from "../src/api";
import { createPinStore } from "../src/pins";
import { stubService } from "./stub";

describe("api client", () => {
    it("builds render urls", () => {
        const api = new ApiClient("http://host");
        expect(api.renderUrl("s1", 0.7, 3)).toBe("http://host/sessions/s1/render?eta=0.7&seed=3");
    });

    it("maps 503 with Retry-After onto DeviceBusyError", async () => {
        const fetchFn = (async () =>
            new Response("busy", { status: 503, headers: { "Retry-After": "7" } })
        ) as typeof fetch;
        const api = new ApiClient("", fetchFn);
        await expect(api.getSession("x")).rejects.toThrowError(DeviceBusyError);
        await api.getSession("x").catch((err: DeviceBusyError) => {
            expect(err.retryAfterSeconds).toBe(7);
        });
    });

    it("maps other failures onto ApiError with the service detail", async () => {
        const fetchFn = (async () =>
            Response.json({ detail: "unknown session x" }, { status: 404 })
        ) as typeof fetch;
        const api = new ApiClient("", fetchFn);
        const err = await api.getSession("x").catch((e) => e);
        expect(err).toBeInstanceOf(ApiError);
        expect(err.status).toBe(404);
        expect(err.message).toContain("unknown session x");
    });

    it("reads sessions and sweeps from the stub service", async () => {
        const stub = stubService({ sweepRows: [
            { eta: 0, mean_alignment: 0.1, mean_fidelity: 40, n: 2, seeds: [0] },
        ] });
        const api = new ApiClient("", stub.fetchFn);
        const sessions = await api.listSessions();
        expect(sessions[0].session_id).toBe("abc123");
        const rows = await api.getSweep("abc123");
        expect(rows).toHaveLength(1);
        expect(rows[0].mean_fidelity).toBe(40);
    });
});

describe("pin store", () => {
    it("round-trips pins and ignores garbage", () => {
        const backing = new Map<string, string>();
        const storage = {
            getItem: (k: string) => backing.get(k) ?? null,
            setItem: (k: string, v: string) => void backing.set(k, v),
            removeItem: (k: string) => void backing.delete(k),
        } as Storage;
        const pins = createPinStore(storage);
        expect(pins.get("s")).toBeNull();
        pins.set("s", { eta: 0.7, seed: 3 });
        expect(createPinStore(storage).get("s")).toEqual({ eta: 0.7, seed: 3 });
        backing.set("spritedit.pin.s", "{not json");
        expect(pins.get("s")).toBeNull();
        pins.set("s", { eta: 0.5, seed: 1 });
        pins.clear("s");
        expect(pins.get("s")).toBeNull();
    });
});
