// REST client for the propaseg session API. All methods raise ApiError
// with the server's {code, message} payload on non-2xx responses.

import type { RlePayload } from "./rle.js";

export type Axis = "axial" | "coronal" | "sagittal";
export type Variant = "image" | "baseline" | "refined" | "label";

export interface SessionSummary {
  session_id: string;
  model_id: string;
  dims: [number, number, number];
  channels: number;
  spacing_mm: [number, number, number];
  edit_count: number;
  edited_slices: number[];
  has_label: boolean;
  suggested_slice?: number;
  baseline_dsc?: number;
  current_dsc?: number;
}

export interface SlicePayload {
  variant: Variant;
  axis: Axis;
  index: number;
  height: number;
  width: number;
  values: number[][];
}

export interface EditResult {
  edit_index: number;
  slice_index: number;
  elapsed_ms: number;
  diverged: boolean;
  iterations: number;
  neighborhood: number[];
  provenance: string[];
  dsc_whole_before?: number;
  dsc_whole_after?: number;
  per_slice_dsc?: number[];
  suggested_slice?: number;
}

export interface HistoryEntry {
  edit_index: number;
  slice_index: number;
  diverged: boolean;
  iterations: number;
  neighborhood: number[];
  dsc_whole?: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function asJson<T>(res: Response): Promise<T> {
  if (!res.ok) {
    let code = "http_error";
    let message = `${res.status} ${res.statusText}`;
    try {
      const body = await res.json();
      code = body.code ?? code;
      message = body.message ?? message;
    } catch {
      // non-JSON error body; keep defaults
    }
    throw new ApiError(res.status, code, message);
  }
  return res.json() as Promise<T>;
}

export class Client {
  constructor(
    public baseUrl: string = "",
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async get<T>(path: string): Promise<T> {
    return asJson<T>(await this.fetchFn(`${this.baseUrl}${path}`));
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    return asJson<T>(res);
  }

  health(): Promise<{ status: string; models: string[] }> {
    return this.get("/health");
  }

  createSession(body: Record<string, unknown>): Promise<SessionSummary> {
    return this.post("/sessions", body);
  }

  getSession(id: string): Promise<SessionSummary> {
    return this.get(`/sessions/${id}`);
  }

  getSlice(id: string, variant: Variant, axis: Axis, index: number): Promise<SlicePayload> {
    return this.get(
      `/sessions/${id}/slices?variant=${variant}&axis=${axis}&index=${index}`,
    );
  }

  submitEdit(id: string, sliceIndex: number, mask: RlePayload): Promise<EditResult> {
    return this.post(`/sessions/${id}/edits`, { slice_index: sliceIndex, mask });
  }

  history(id: string): Promise<{ session_id: string; edits: HistoryEntry[] }> {
    return this.get(`/sessions/${id}/history`);
  }

  metrics(id: string): Promise<Record<string, unknown>> {
    return this.get(`/sessions/${id}/metrics`);
  }
}
