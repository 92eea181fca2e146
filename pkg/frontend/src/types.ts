export interface StageFlags {
    a: boolean;
    b: boolean;
    c: boolean;
}

export interface SessionSummary {
    session_id: string;
    target_caption: string;
    stages: StageFlags;
    job_state: string;
    job_error?: string | null;
}

export interface RenderMetrics {
    eta: number;
    seed: number;
    alignment: number;
    fidelity_psnr: number;
    oracle_caption: string;
    recommended: boolean;
}

export interface CachedRender {
    eta: number;
    seed: number;
    url: string;
}

export interface SessionDetail extends SessionSummary {
    seeds: number[];
    default_eta: number;
    metrics: RenderMetrics[];
    cached_renders: CachedRender[];
}

export interface SweepRow {
    eta: number;
    mean_alignment: number;
    mean_fidelity: number;
    n: number;
    seeds: number[];
}

export interface CreateSessionRequest {
    target_text: string;
    image_id?: string;
    image_png_base64?: string;
}

export const FIDELITY_CEILING_DB = 60;
