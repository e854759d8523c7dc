// In-memory stand-in implementing the service's wire contract for unit
// tests: forward-only cursor, idempotent reads, duplicate rejection,
// blinded payloads.

import type { Answer } from "../src/api.js";

export interface FakeItem {
  itemId: string;
  truth: Answer;
}

interface FakeSession {
  raterId: string;
  testId: number;
  order: FakeItem[];
  cursor: number;
  answers: Map<string, Answer>;
}

const TINY_PNG =
  "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAAAAAA6fptVAAAACklEQVR4nGNiAAAABgADNjd8qAAAAABJRU5ErkJggg==";

export class FakeService {
  sessions = new Map<string, FakeSession>();
  submitCalls = 0;
  payloadLog: unknown[] = [];

  constructor(private readonly itemsPerSession = 6) {}

  private makeOrder(seed: number): FakeItem[] {
    const items: FakeItem[] = [];
    for (let i = 0; i < this.itemsPerSession; i += 1) {
      items.push({
        itemId: `it${seed}-${i}`,
        truth: i % 2 === 0 ? "real" : "synthetic",
      });
    }
    return items;
  }

  fetch = async (input: string | URL | Request, init?: RequestInit): Promise<Response> => {
    const url = typeof input === "string" ? input : input.toString();
    const method = init?.method ?? "GET";
    const body = init?.body ? JSON.parse(String(init.body)) : null;
    const respond = (status: number, payload: unknown): Response => {
      this.payloadLog.push(payload);
      return new Response(JSON.stringify(payload), {
        status,
        headers: { "content-type": "application/json" },
      });
    };

    const createMatch = url.match(/\/sessions$/);
    if (createMatch && method === "POST") {
      const sessionId = `${body.rater_id}:${body.test_id}:${body.seed ?? 0}`;
      let session = this.sessions.get(sessionId);
      const resumed = session !== undefined;
      if (!session) {
        session = {
          raterId: body.rater_id,
          testId: body.test_id,
          order: this.makeOrder(body.seed ?? 0),
          cursor: 0,
          answers: new Map(),
        };
        this.sessions.set(sessionId, session);
      }
      return respond(200, {
        session_id: sessionId,
        test_id: session.testId,
        progress: { answered: session.cursor, total: session.order.length },
        resumed,
      });
    }

    const nextMatch = url.match(/\/sessions\/([^/]+)\/next$/);
    if (nextMatch && method === "GET") {
      const session = this.sessions.get(decodeURIComponent(nextMatch[1]!));
      if (!session) {
        return respond(404, { detail: "unknown session" });
      }
      if (session.cursor >= session.order.length) {
        return respond(200, {
          completed: true,
          progress: { answered: session.cursor, total: session.order.length },
        });
      }
      const item = session.order[session.cursor]!;
      return respond(200, {
        completed: false,
        item_id: item.itemId,
        progress: { answered: session.cursor, total: session.order.length },
        axial_png: TINY_PNG,
        coronal_png: TINY_PNG,
        sagittal_png: TINY_PNG,
      });
    }

    const answerMatch = url.match(/\/sessions\/([^/]+)\/answers$/);
    if (answerMatch && method === "POST") {
      this.submitCalls += 1;
      const session = this.sessions.get(decodeURIComponent(answerMatch[1]!));
      if (!session) {
        return respond(404, { detail: "unknown session" });
      }
      if (session.cursor >= session.order.length) {
        return respond(409, { detail: "session already completed" });
      }
      if (session.answers.has(body.item_id)) {
        return respond(409, { detail: "item already answered" });
      }
      const current = session.order[session.cursor]!;
      if (body.item_id !== current.itemId) {
        return respond(409, { detail: "out-of-order answer" });
      }
      session.answers.set(body.item_id, body.answer);
      session.cursor += 1;
      return respond(200, {
        accepted: true,
        progress: { answered: session.cursor, total: session.order.length },
        completed: session.cursor >= session.order.length,
      });
    }

    const reportMatch = url.match(/\/reports\/(\d+)$/);
    if (reportMatch && method === "GET") {
      const testId = Number(reportMatch[1]);
      const rows = [];
      for (const session of this.sessions.values()) {
        if (session.testId !== testId || session.cursor < session.order.length) {
          continue;
        }
        const cells = { rr: 0, rs: 0, sr: 0, ss: 0 };
        for (const item of session.order) {
          const answer = session.answers.get(item.itemId)!;
          if (item.truth === "real") {
            answer === "real" ? (cells.rr += 1) : (cells.rs += 1);
          } else {
            answer === "real" ? (cells.sr += 1) : (cells.ss += 1);
          }
        }
        rows.push({
          test_id: testId,
          rater: session.raterId,
          accuracy: (cells.rr + cells.ss) / session.order.length,
          real_as_real: cells.rr,
          real_as_synt: cells.rs,
          synt_as_real: cells.sr,
          synt_as_synt: cells.ss,
        });
      }
      return respond(200, { test_id: testId, rows, incomplete_sessions: [] });
    }

    return respond(404, { detail: `no route for ${method} ${url}` });
  };
}
