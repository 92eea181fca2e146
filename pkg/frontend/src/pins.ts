export interface Pin {
    eta: number;
    seed: number;
}

/**
 * Pinned-render store. The service API has no write endpoint for choices, so
 * the user's pick lives in browser local storage keyed by session id; it
 * survives reloads and is the only state the UI keeps beyond the service.
 */
export function createPinStore(storage: Storage) {
    const key = (sessionId: string) => `spritedit.pin.${sessionId}`;
    return {
        get(sessionId: string): Pin | null {
            const raw = storage.getItem(key(sessionId));
            if (!raw) return null;
            try {
                const parsed = JSON.parse(raw) as Pin;
                if (typeof parsed.eta === "number" && typeof parsed.seed === "number") {
                    return parsed;
                }
            } catch {
                /* corrupted entry: treat as unpinned */
            }
            return null;
        },
        set(sessionId: string, pin: Pin): void {
            storage.setItem(key(sessionId), JSON.stringify(pin));
        },
        clear(sessionId: string): void {
            storage.removeItem(key(sessionId));
        },
    };
}

export type PinStore = ReturnType<typeof createPinStore>;
