import { ApiClient, ApiError, DeviceBusyError } from "./api";
import type { SessionDetail } from "./types";

const POLL_MS = 1500;

export interface CreateForm {
    root: HTMLElement;
    dispose(): void;
}

/**
 * Session creation form plus stage progress panel.
 *
 * The input is either a sprite caption or an uploaded 32px PNG; submit stays
 * disabled until a target text is present. Progress is polled from the
 * service until stages A and B have both run (or the job fails).
 */
export function createSessionForm(opts: {
    root: HTMLElement;
    api: ApiClient;
    onReady: (detail: SessionDetail) => void;
    document?: Document;
    pollMs?: number;
}): CreateForm {
    const doc = opts.document ?? document;
    const { api, onReady } = opts;
    const pollMs = opts.pollMs ?? POLL_MS;
    let timer: ReturnType<typeof setInterval> | null = null;

    const root = opts.root;
    root.classList.add("create-form");
    root.innerHTML = "";

    const form = doc.createElement("form");
    const imageInput = doc.createElement("input");
    imageInput.type = "text";
    imageInput.name = "image_id";
    imageInput.placeholder = "input sprite caption, e.g. small red circle upright top left white";
    const fileInput = doc.createElement("input");
    fileInput.type = "file";
    fileInput.accept = "image/png";
    const targetInput = doc.createElement("input");
    targetInput.type = "text";
    targetInput.name = "target_text";
    targetInput.placeholder = "target text (the desired edit)";
    const submit = doc.createElement("button");
    submit.type = "submit";
    submit.textContent = "start edit";
    submit.disabled = true;
    const progress = doc.createElement("div");
    progress.className = "progress";
    form.append(imageInput, fileInput, targetInput, submit);
    root.append(form, progress);

    targetInput.addEventListener("input", () => {
        submit.disabled = targetInput.value.trim().length === 0;
    });

    function setProgress(text: string, state: "idle" | "queued" | "running" | "failed" | "done"): void {
        progress.textContent = text;
        progress.dataset.state = state;
    }

    async function encodeUpload(): Promise<string | undefined> {
        const file = fileInput.files?.[0];
        if (!file) return undefined;
        const buf = new Uint8Array(await file.arrayBuffer());
        let binary = "";
        buf.forEach((b) => (binary += String.fromCharCode(b)));
        return btoa(binary);
    }

    function poll(sessionId: string): void {
        if (timer !== null) clearInterval(timer);
        timer = setInterval(async () => {
            try {
                const detail = await api.getSession(sessionId);
                if (detail.job_state === "failed") {
                    setProgress(`fine-tune failed: ${detail.job_error ?? "unknown error"}`, "failed");
                    if (timer !== null) clearInterval(timer);
                } else if (detail.stages.a && detail.stages.b) {
                    setProgress("stages A and B complete; explore below", "done");
                    if (timer !== null) clearInterval(timer);
                    onReady(detail);
                } else if (detail.stages.a) {
                    setProgress("stage B: fine-tuning the models…", "running");
                } else if (detail.job_state === "running") {
                    setProgress("stage A: optimizing the text embedding…", "running");
                } else {
                    setProgress("waiting for the device…", "queued");
                }
            } catch (err) {
                setProgress(String(err), "failed");
            }
        }, pollMs);
    }

    form.addEventListener("submit", (event) => {
        event.preventDefault();
        void (async () => {
            setProgress("submitting…", "queued");
            try {
                const upload = await encodeUpload();
                const body = upload !== undefined
                    ? { target_text: targetInput.value.trim(), image_png_base64: upload }
                    : { target_text: targetInput.value.trim(), image_id: imageInput.value.trim() };
                const { session_id } = await api.createSession(body);
                setProgress(`session ${session_id} queued`, "queued");
                poll(session_id);
            } catch (err) {
                if (err instanceof DeviceBusyError) {
                    setProgress(`device busy; queued (retry in ${err.retryAfterSeconds}s)`, "queued");
                } else if (err instanceof ApiError) {
                    setProgress(err.message, "failed");
                } else {
                    setProgress(String(err), "failed");
                }
            }
        })();
    });

    return {
        root,
        dispose(): void {
            if (timer !== null) clearInterval(timer);
        },
    };
}
