/** UI-side session state: the query queue, the double-submit guard, and
 * polling while the backend adapts between rounds. Pure logic — no DOM. */

import {
  AnnotationClient,
  ApiError,
  LabelAck,
  Progress,
  QueryPayload,
  SessionMetrics,
} from "./api.js";

export type SessionPhase = "labeling" | "adapting" | "done";

export interface SessionView {
  phase: SessionPhase;
  /** Queries still needing a label this round, highest entropy first. */
  queue: QueryPayload[];
  progress: Progress | null;
  metrics: SessionMetrics | null;
  /** Last transport or server error, cleared on the next success. */
  error: string | null;
}

export class LabelingSession {
  private queue: QueryPayload[] = [];
  private phase: SessionPhase = "labeling";
  private progress: Progress | null = null;
  private metrics: SessionMetrics | null = null;
  private error: string | null = null;
  /** sample ids with a submission in flight or already acknowledged */
  private readonly settled = new Set<number>();
  private readonly inFlight = new Set<number>();

  constructor(
    private readonly client: AnnotationClient,
    readonly sessionId: string,
  ) {}

  view(): SessionView {
    return {
      phase: this.phase,
      queue: [...this.queue],
      progress: this.progress,
      metrics: this.metrics,
      error: this.error,
    };
  }

  /** Pull the current round from the server. Safe to call on a timer. */
  async refresh(): Promise<SessionView> {
    try {
      const resp = await this.client.getQueries(this.sessionId);
      this.error = null;
      this.progress = resp.progress ?? this.progress;
      if (resp.status === "done") {
        this.phase = "done";
        this.queue = [];
        this.metrics = resp.metrics ?? this.metrics;
      } else if (resp.queries.length === 0) {
        this.phase = "adapting";
        this.queue = [];
      } else {
        this.phase = "labeling";
        this.queue = resp.queries.filter((q) => !this.settled.has(q.sample_id));
        // a fresh round means the guard for past rounds can be dropped
        if (this.queue.length === resp.queries.length) this.settled.clear();
      }
    } catch (err) {
      this.error = err instanceof Error ? err.message : String(err);
    }
    return this.view();
  }

  /**
   * Submit one label. Duplicate calls for the same sample (double click,
   * repeated keypress) are dropped locally; server-side conflicts are
   * surfaced as an already-settled ack rather than an error.
   */
  async label(sampleId: number, label: 0 | 1): Promise<LabelAck | null> {
    if (this.inFlight.has(sampleId) || this.settled.has(sampleId)) {
      return null;
    }
    this.inFlight.add(sampleId);
    try {
      const ack = await this.client.submitLabel(this.sessionId, sampleId, label);
      this.error = null;
      this.settled.add(sampleId);
      this.queue = this.queue.filter((q) => q.sample_id !== sampleId);
      if (ack.status === "done") {
        this.phase = "done";
      } else if (this.queue.length === 0) {
        this.phase = "adapting";
      }
      return ack;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // someone else labeled it, or the round moved on: treat as settled
        this.settled.add(sampleId);
        this.queue = this.queue.filter((q) => q.sample_id !== sampleId);
        if (this.phase === "labeling" && this.queue.length === 0) {
          this.phase = "adapting";
        }
        return { accepted: false, conflict: true, status: this.phase };
      }
      this.error = err instanceof Error ? err.message : String(err);
      return null;
    } finally {
      this.inFlight.delete(sampleId);
    }
  }
}

/** Poll `refresh` every `intervalMs` until the session is done.
 * Returns a stop function. */
export function pollSession(
  session: LabelingSession,
  onUpdate: (view: SessionView) => void,
  intervalMs = 1000,
  timer: { set: typeof setInterval; clear: typeof clearInterval } = {
    set: setInterval,
    clear: clearInterval,
  },
): () => void {
  const handle = timer.set(async () => {
    const view = await session.refresh();
    onUpdate(view);
    if (view.phase === "done") timer.clear(handle);
  }, intervalMs);
  return () => timer.clear(handle);
}
