/** Typed client for the annotation service HTTP API. */

export interface ChannelImage {
  name: string;
  png_base64: string;
}

export interface QueryPayload {
  sample_id: number;
  entropy: number | null;
  channels: ChannelImage[];
  composite_png_base64: string;
  composite_channels: number[];
}

export interface Progress {
  labeled: number;
  budget: number;
}

export interface SessionMetrics {
  accuracy: number;
  labeled: number;
  rounds: number;
}

export interface SessionInfo {
  session_id: string;
  status: string;
  pending: number[];
  label_names: Record<string, string>;
}

export interface QueriesResponse {
  status: string;
  queries: QueryPayload[];
  progress?: Progress;
  metrics?: SessionMetrics;
}

export interface HistoryEntry {
  round: number;
  sample_id: number;
  entropy: number | null;
  label: number;
}

export interface StatusResponse {
  status: string;
  history: HistoryEntry[];
  progress: Progress;
  pending: number[];
  metrics?: SessionMetrics;
}

export interface LabelAck {
  accepted: boolean;
  conflict: boolean;
  retained_label?: number;
  status: string;
}

export interface CreateSessionOptions {
  task?: number;
  budget?: number;
  seed?: number;
  t_passes?: number;
  query_batch?: number;
}

/** Non-2xx response, with the server's detail message when present. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class AnnotationClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, {
      method,
      headers: body === undefined ? {} : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await resp.text();
    let parsed: unknown = null;
    try {
      parsed = text ? JSON.parse(text) : null;
    } catch {
      parsed = null;
    }
    if (!resp.ok) {
      const detail =
        parsed && typeof parsed === "object" && "detail" in parsed
          ? String((parsed as { detail: unknown }).detail)
          : `${method} ${path} failed with ${resp.status}`;
      throw new ApiError(resp.status, detail);
    }
    return parsed as T;
  }

  createSession(opts: CreateSessionOptions = {}): Promise<SessionInfo> {
    return this.request<SessionInfo>("POST", "/sessions", opts);
  }

  getQueries(sessionId: string): Promise<QueriesResponse> {
    return this.request<QueriesResponse>(
      "GET",
      `/sessions/${sessionId}/queries`,
    );
  }

  submitLabel(
    sessionId: string,
    sampleId: number,
    label: 0 | 1,
    annotator = "ui",
  ): Promise<LabelAck> {
    return this.request<LabelAck>("POST", `/sessions/${sessionId}/labels`, {
      sample_id: sampleId,
      label,
      annotator,
    });
  }

  getStatus(sessionId: string): Promise<StatusResponse> {
    return this.request<StatusResponse>(
      "GET",
      `/sessions/${sessionId}/status`,
    );
  }
}
