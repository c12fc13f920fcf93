/** Typed client for the annotation service JSON API. */

export type Label = "tumor" | "non_tumor";
export type StatusFilter = "all" | "labeled" | "unlabeled";

export interface CohortInfo {
  version: number;
  patients: { id: string; response: string; slides: string[] }[];
  tile_size: number;
  n_tiles: number;
}

export interface TileRow {
  slide: string;
  x: number;
  y: number;
  tissue_fraction: number;
  label: Label | null;
  image_url: string;
}

export interface TilePage {
  total: number;
  page: number;
  page_size: number;
  tiles: TileRow[];
}

export interface Progress {
  labeled: number;
  total: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  const body = await resp.json();
  if (!resp.ok) {
    throw new ApiError(
      resp.status,
      typeof body?.error === "string" ? body.error : "unknown",
      typeof body?.message === "string" ? body.message : resp.statusText,
    );
  }
  return body as T;
}

export class ApiClient {
  constructor(private base: string = "") {}

  getCohort(): Promise<CohortInfo> {
    return fetch(`${this.base}/api/cohort`).then((r) => asJson<CohortInfo>(r));
  }

  getTiles(opts: { slide?: string; status?: StatusFilter; page?: number } = {}): Promise<TilePage> {
    const params = new URLSearchParams();
    if (opts.slide !== undefined) params.set("slide", opts.slide);
    if (opts.status !== undefined) params.set("status", opts.status);
    if (opts.page !== undefined) params.set("page", String(opts.page));
    const qs = params.toString();
    return fetch(`${this.base}/api/tiles${qs ? `?${qs}` : ""}`).then((r) => asJson<TilePage>(r));
  }

  postLabel(slide: string, x: number, y: number, label: Label, annotator: string): Promise<{ ok: boolean; seq: number }> {
    return fetch(`${this.base}/api/label`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ slide, x, y, label, annotator }),
    }).then((r) => asJson<{ ok: boolean; seq: number }>(r));
  }

  postUndo(annotator: string): Promise<{ ok: boolean; seq: number; target_seq: number }> {
    return fetch(`${this.base}/api/undo`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ annotator }),
    }).then((r) => asJson<{ ok: boolean; seq: number; target_seq: number }>(r));
  }

  getProgress(): Promise<Progress> {
    return fetch(`${this.base}/api/progress`).then((r) => asJson<Progress>(r));
  }
}
