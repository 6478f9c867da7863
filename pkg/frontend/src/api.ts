/**
 * Typed client for the study server API.
 *
 * All requests are serialized: at most one is in flight at any time, and
 * choice submission is never optimistic (callers await the server reply).
 */

export interface SessionDescriptor {
  id: string;
  algorithm: string;
  n_practice: number;
  n_test: number;
  exposure_ms: number;
  cursor: number;
  completed: boolean;
}

export interface TrialPayload {
  index: number;
  phase: "practice" | "test";
  left: string;
  right: string;
  exposure_ms: number;
}

export interface ChoiceReply {
  phase: "practice" | "test";
  correct?: boolean;
  acknowledged?: boolean;
}

export type Side = "left" | "right";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class StudyApi {
  private chain: Promise<unknown> = Promise.resolve();
  private inFlight = 0;

  constructor(
    private readonly base: string,
    private readonly fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  /** Number of requests currently on the wire (0 or 1 by construction). */
  get pending(): number {
    return this.inFlight;
  }

  private enqueue<T>(run: () => Promise<T>): Promise<T> {
    const next = this.chain.then(async () => {
      this.inFlight += 1;
      try {
        return await run();
      } finally {
        this.inFlight -= 1;
      }
    });
    this.chain = next.catch(() => undefined);
    return next;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    return this.enqueue(async () => {
      const init: RequestInit = { method, headers: {} };
      if (body !== undefined) {
        init.headers = { "content-type": "application/json" };
        init.body = JSON.stringify(body);
      }
      const resp = await this.fetchFn(this.base + path, init);
      const text = await resp.text();
      let doc: unknown = null;
      try {
        doc = text ? JSON.parse(text) : null;
      } catch {
        doc = null;
      }
      if (!resp.ok) {
        const err = (doc ?? {}) as { code?: string; message?: string };
        throw new ApiError(resp.status, err.code ?? "unknown", err.message ?? text);
      }
      return doc as T;
    });
  }

  createSession(algorithm: string, token: string): Promise<SessionDescriptor> {
    return this.request("POST", "/api/sessions", { algorithm, token });
  }

  getTrial(sessionId: string, n: number): Promise<TrialPayload> {
    return this.request("GET", `/api/sessions/${sessionId}/trials/${n}`);
  }

  submitChoice(
    sessionId: string,
    n: number,
    side: Side,
    responseMs: number,
  ): Promise<ChoiceReply> {
    return this.request("POST", `/api/sessions/${sessionId}/choices`, {
      n,
      side,
      response_ms: responseMs,
    });
  }
}
