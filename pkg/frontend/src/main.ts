import { ApiClient } from "./api";
import { createSessionForm } from "./create";
import { createExploreView, ExploreView } from "./explore";
import { createPinStore } from "./pins";
import type { SessionDetail, SessionSummary } from "./types";

function el(id: string): HTMLElement {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing #${id}`);
    return node;
}

export function boot(): void {
    const api = new ApiClient("");
    const pins = createPinStore(window.localStorage);
    let explore: ExploreView | null = null;

    const listRoot = el("session-list");

    function openSession(detail: SessionDetail): void {
        explore?.dispose();
        explore = createExploreView({ root: el("explore"), api, detail, pins });
        void explore.refresh();
    }

    async function refreshList(): Promise<void> {
        const sessions: SessionSummary[] = await api.listSessions();
        listRoot.innerHTML = "";
        for (const s of sessions) {
            const item = document.createElement("button");
            item.type = "button";
            item.className = "session-item";
            const ready = s.stages.a && s.stages.b;
            item.textContent = `${s.session_id} · ${s.target_caption} · ` +
                (ready ? "ready" : s.job_state);
            item.disabled = !ready;
            item.addEventListener("click", () => {
                void api.getSession(s.session_id).then(openSession);
            });
            listRoot.appendChild(item);
        }
    }

    createSessionForm({
        root: el("create"),
        api,
        onReady: (detail) => {
            void refreshList();
            openSession(detail);
        },
    });

    void refreshList();
    setInterval(() => void refreshList(), 5000);
}

boot();
