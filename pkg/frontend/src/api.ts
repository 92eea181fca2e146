import type {
    CreateSessionRequest,
    SessionDetail,
    SessionSummary,
    SweepRow,
} from "./types";

export class DeviceBusyError extends Error {
    constructor(public retryAfterSeconds: number) {
        super(`device busy, retry after ${retryAfterSeconds}s`);
    }
}

export class ApiError extends Error {
    constructor(public status: number, detail: string) {
        super(`${status}: ${detail}`);
    }
}

async function raiseFor(resp: Response): Promise<never> {
    if (resp.status === 503) {
        const after = Number(resp.headers.get("Retry-After") ?? "5");
        throw new DeviceBusyError(Number.isFinite(after) ? after : 5);
    }
    let detail = resp.statusText;
    try {
        const body = await resp.json();
        if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
        /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail);
}

/** Thin typed client over the session service; every view reads through it. */
export class ApiClient {
    constructor(
        private baseUrl: string = "",
        private fetchFn: typeof fetch = fetch.bind(globalThis),
    ) {}

    private async getJson<T>(path: string): Promise<T> {
        const resp = await this.fetchFn(this.baseUrl + path);
        if (!resp.ok) await raiseFor(resp);
        return (await resp.json()) as T;
    }

    async createSession(req: CreateSessionRequest): Promise<{ session_id: string }> {
        const resp = await this.fetchFn(this.baseUrl + "/sessions", {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify(req),
        });
        if (!resp.ok) await raiseFor(resp);
        return (await resp.json()) as { session_id: string };
    }

    listSessions(): Promise<SessionSummary[]> {
        return this.getJson("/sessions");
    }

    getSession(id: string): Promise<SessionDetail> {
        return this.getJson(`/sessions/${id}`);
    }

    async getSweep(id: string): Promise<SweepRow[]> {
        const body = await this.getJson<{ rows: SweepRow[] }>(`/sessions/${id}/sweep`);
        return body.rows;
    }

    renderUrl(id: string, eta: number, seed: number): string {
        return `${this.baseUrl}/sessions/${id}/render?eta=${eta}&seed=${seed}`;
    }

    /** Fetch one render as an object URL; throws DeviceBusyError on 503. */
    async fetchRender(id: string, eta: number, seed: number): Promise<Blob> {
        const resp = await this.fetchFn(this.renderUrl(id, eta, seed));
        if (!resp.ok) await raiseFor(resp);
        return await resp.blob();
    }
}
