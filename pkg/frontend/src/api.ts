// Typed client for the explorer JSON API plus the deform request scheduler.
// The scheduler debounces slider drags and guarantees a single in-flight
// request: responses carry a monotonically increasing id and anything older
// than the newest dispatched request is dropped.

export interface Contour {
  slice: number;
  axis: number;
  label: number;
  role: "original" | "deformed";
  points: [number, number][];
}

export interface Meta {
  api_version: number;
  K: number;
  evr: number[];
  subjects: string[];
  shape: number[];
  center_mode: boolean;
}

export interface SliceResponse {
  image_pgm: string;
  contours: Contour[];
}

export interface DeformResponse {
  image_pgm: string;
  contours_original: Contour[];
  contours_deformed: Contour[];
  jacobian_stats: { min_det: number; fold_fraction: number };
}

export interface ProbeSummary {
  transform: string;
  components: { component: number; median: number; q1: number; q3: number }[];
  dominance_ratio: number;
}

export interface DeformRequest {
  subject_id: string;
  coefficients: number[];
  axis: number;
  slice_index: number;
}

export class ApiClient {
  constructor(private base: string = "") {}

  private async get<T>(path: string): Promise<T> {
    const resp = await fetch(this.base + path);
    if (!resp.ok) throw new Error(`${path}: HTTP ${resp.status}`);
    return (await resp.json()) as T;
  }

  meta(): Promise<Meta> {
    return this.get<Meta>("/api/meta");
  }

  slice(subject: string, axis: number, index: number): Promise<SliceResponse> {
    return this.get<SliceResponse>(
      `/api/subject/${encodeURIComponent(subject)}/slice?axis=${axis}&index=${index}`);
  }

  probe(transform: string): Promise<ProbeSummary> {
    return this.get<ProbeSummary>(`/api/probe/${encodeURIComponent(transform)}`);
  }

  async deform(req: DeformRequest, signal?: AbortSignal): Promise<DeformResponse> {
    const resp = await fetch(this.base + "/api/deform", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
      signal,
    });
    if (!resp.ok) throw new Error(`/api/deform: HTTP ${resp.status}`);
    return (await resp.json()) as DeformResponse;
  }
}

type PostFn = (req: DeformRequest, signal?: AbortSignal) => Promise<DeformResponse>;

export class DeformScheduler {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private nextId = 0;
  private newestDispatched = 0;
  private newestDelivered = 0;
  private inflight: AbortController | null = null;

  constructor(
    private post: PostFn,
    private onResult: (resp: DeformResponse) => void,
    private onError: (err: unknown) => void = () => undefined,
    private debounceMs: number = 150,
  ) {}

  /** Schedule a deform request; rapid calls coalesce into the latest one. */
  request(req: DeformRequest): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      this.dispatch(req);
    }, this.debounceMs);
  }

  /** Send immediately, aborting any request still in flight. */
  dispatch(req: DeformRequest): void {
    const id = ++this.nextId;
    this.newestDispatched = id;
    this.inflight?.abort();
    const controller = typeof AbortController === "undefined"
      ? null : new AbortController();
    this.inflight = controller;
    this.post(req, controller?.signal).then(
      (resp) => {
        if (id < this.newestDispatched || id <= this.newestDelivered) return; // stale
        this.newestDelivered = id;
        this.onResult(resp);
      },
      (err) => {
        if (id < this.newestDispatched) return; // superseded or aborted
        this.onError(err);
      },
    );
  }
}
