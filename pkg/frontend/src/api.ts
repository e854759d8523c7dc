// Typed client for the study service. The wire contract is small and
// fixed: POST /sessions, GET /sessions/{id}/next, POST /sessions/{id}/answers,
// GET /reports/{test_id}. Payloads never carry truth labels; assertBlinded
// enforces that invariant on everything we receive.

export type Answer = "real" | "synthetic";

export interface Progress {
  answered: number;
  total: number;
}

export interface SessionInfo {
  session_id: string;
  test_id: number;
  progress: Progress;
  resumed: boolean;
}

export interface ItemPayload {
  completed: boolean;
  progress: Progress;
  item_id?: string;
  axial_png?: string;
  coronal_png?: string;
  sagittal_png?: string;
}

export interface SubmitAck {
  accepted: boolean;
  progress: Progress;
  completed: boolean;
}

export interface ReportRow {
  test_id: number;
  rater: string;
  accuracy: number;
  real_as_real: number;
  real_as_synt: number;
  synt_as_real: number;
  synt_as_synt: number;
}

export interface Report {
  test_id: number;
  rows: ReportRow[];
  incomplete_sessions: string[];
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

/** The service must never send a truth label to the rater's browser. */
export function assertBlinded(payload: unknown): void {
  const scan = (value: unknown): void => {
    if (Array.isArray(value)) {
      value.forEach(scan);
    } else if (value !== null && typeof value === "object") {
      for (const [key, inner] of Object.entries(value)) {
        if (key === "truth") {
          throw new Error("blinding violation: payload carries a truth label");
        }
        scan(inner);
      }
    }
  };
  scan(payload);
}

async function parse<T>(response: Response, blinded: boolean): Promise<T> {
  const body = await response.json().catch(() => null);
  if (!response.ok) {
    const detail =
      body && typeof body === "object" && "detail" in body
        ? String((body as { detail: unknown }).detail)
        : response.statusText;
    throw new ApiError(response.status, detail);
  }
  if (blinded) {
    assertBlinded(body);
  }
  return body as T;
}

export class VttApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  async createSession(raterId: string, testId: number, seed = 0): Promise<SessionInfo> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ rater_id: raterId, test_id: testId, seed }),
    });
    return parse<SessionInfo>(response, true);
  }

  async nextItem(sessionId: string): Promise<ItemPayload> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/next`);
    return parse<ItemPayload>(response, true);
  }

  async submitAnswer(sessionId: string, itemId: string, answer: Answer): Promise<SubmitAck> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/answers`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ item_id: itemId, answer }),
    });
    return parse<SubmitAck>(response, true);
  }

  async report(testId: number): Promise<Report> {
    const response = await this.fetchFn(`${this.baseUrl}/reports/${testId}`);
    return parse<Report>(response, false);
  }
}
