import type { RenderMetrics, SessionDetail, SweepRow } from "../src/types";

export function makeDetail(overrides: Partial<SessionDetail> = {}): SessionDetail {
    return {
        session_id: "abc123",
        target_caption: "large red square upright center white",
        stages: { a: true, b: true, c: false },
        job_state: "done",
        seeds: [0, 1, 2, 3, 4],
        default_eta: 0.7,
        metrics: [],
        cached_renders: [],
        ...overrides,
    };
}

export function metricsRow(overrides: Partial<RenderMetrics> = {}): RenderMetrics {
    return {
        eta: 0.7,
        seed: 0,
        alignment: 0.5,
        fidelity_psnr: 30,
        oracle_caption: "large red square upright center white",
        recommended: false,
        ...overrides,
    };
}

export interface StubOptions {
    detail?: SessionDetail;
    sweepRows?: SweepRow[];
    renderDelayMs?: number;
    failRender?: { status: number; detail: string };
}

/** In-memory fetch stub mimicking the session service endpoints. */
export function stubService(options: StubOptions = {}) {
    const detail = options.detail ?? makeDetail();
    const sweepRows = options.sweepRows ?? [];
    const renderCalls: string[] = [];
    let inFlight = 0;
    let maxInFlight = 0;

    const fetchFn = (async (input: RequestInfo | URL) => {
        const url = String(input);
        if (url.includes("/render")) {
            renderCalls.push(url);
            if (options.failRender) {
                return new Response(JSON.stringify({ detail: options.failRender.detail }), {
                    status: options.failRender.status,
                    headers: { "content-type": "application/json" },
                });
            }
            inFlight += 1;
            maxInFlight = Math.max(maxInFlight, inFlight);
            if (options.renderDelayMs) {
                await new Promise((r) => setTimeout(r, options.renderDelayMs));
            }
            inFlight -= 1;
            return new Response(new Blob([new Uint8Array([137, 80, 78, 71])]), {
                status: 200,
                headers: { "content-type": "image/png" },
            });
        }
        if (url.endsWith("/sweep")) {
            return Response.json({ session_id: detail.session_id, rows: sweepRows });
        }
        if (url.includes("/sessions/")) {
            return Response.json(detail);
        }
        if (url.endsWith("/sessions")) {
            return Response.json([detail]);
        }
        return new Response("not found", { status: 404 });
    }) as typeof fetch;

    return {
        fetchFn,
        renderCalls,
        stats: () => ({ maxInFlight }),
        detail,
    };
}
