/**
 * Typed client for the nnviz explanation service. Every number shown in
 * the UI comes from these response fields; the client computes nothing
 * itself except the alpha re-blend in blend.ts.
 */

export interface ModelCard {
  name: string;
  arch: string;
  input_shape: number[];
  class_names: string[];
  capture_layer: string;
  head: string;
  checkpoint_crc32: string;
}

export interface TopkEntry {
  class: string;
  confidence: number;
}

export interface PredictResponse {
  topk: TopkEntry[];
  all: number[];
}

export interface RawGrid {
  width: number;
  height: number;
  values: number[];
}

export interface ExplainMeta {
  method: string;
  class: string | null;
  class_index?: number;
  resolution: string;
  degenerate: boolean;
  alpha: number;
  baseline_confidence?: number | null;
}

export interface ExplainResponse {
  overlay: string; // base-64 PNG
  base: string;    // base-64 PNG of the letterboxed model input
  raw_grid: RawGrid;
  meta: ExplainMeta;
}

export interface ExplainRequest {
  image: string;
  method: string;
  class?: string | number;
  alpha?: number;
  occlusion_patch?: number;
  occlusion_stride?: number;
  layer?: string;
}

export interface JobResult {
  class: string;
  image: string; // base-64 PNG
  logits: number[];
  tv: number[];
  final_confidence: number;
}

export interface JobRecord {
  id: string;
  kind: string;
  status: "queued" | "running" | "done" | "failed";
  result?: JobResult;
  error?: string;
}

/** Service errors keep the server's {code, message}; network failures get
 * code "unreachable" and status 0 so the UI can say so explicitly. */
export class ServiceError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  let resp: Response;
  try {
    resp = await fetch(url, init);
  } catch (err) {
    throw new ServiceError(0, "unreachable", `service unreachable: ${err}`);
  }
  let body: unknown = null;
  try {
    body = await resp.json();
  } catch {
    // fall through; non-JSON error bodies become generic errors below
  }
  if (!resp.ok) {
    const e = (body ?? {}) as { code?: string; message?: string };
    throw new ServiceError(
      resp.status,
      e.code ?? "bad_gateway",
      e.message ?? `service answered ${resp.status}`,
    );
  }
  return body as T;
}

/** Client bound to a base URL ("" when served from the API process). */
export function makeApi(base = "") {
  const post = <T>(path: string, payload: unknown): Promise<T> =>
    request<T>(`${base}${path}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  return {
    model: () => request<ModelCard>(`${base}/api/model`),
    predict: (imageB64: string) =>
      post<PredictResponse>("/api/predict", { image: imageB64 }),
    explain: (req: ExplainRequest) =>
      post<ExplainResponse>("/api/explain", req),
    submitImpression: (klass: string, config: Record<string, number>) =>
      post<{ job_id: string }>("/api/impressions", { class: klass, config }),
    job: (id: string) => request<JobRecord>(`${base}/api/jobs/${id}`),
  };
}

export const api = makeApi();
