import { describe, expect, it } from "vitest";

import { VttApi, assertBlinded } from "../src/api.js";
import { FlowState, SessionFlow } from "../src/flow.js";
import { FakeService } from "./fake-service.js";

function makeFlow(service: FakeService): { flow: SessionFlow; states: FlowState[] } {
  const states: FlowState[] = [];
  const api = new VttApi("http://svc", service.fetch);
  const flow = new SessionFlow(api, (state) => states.push(state));
  return { flow, states };
}

describe("session flow", () => {
  it("completes a full session and fetches the report", async () => {
    const service = new FakeService(6);
    const { flow } = makeFlow(service);
    await flow.start("rater-a", 1);
    for (let i = 0; i < 6; i += 1) {
      expect(flow.current().kind).toBe("item");
      await flow.answer(i % 2 === 0 ? "real" : "synthetic");
    }
    const state = flow.current();
    expect(state.kind).toBe("completed");
    if (state.kind === "completed") {
      expect(state.report.rows).toHaveLength(1);
      expect(state.report.rows[0]!.accuracy).toBe(1.0);
    }
  });

  it("drops re-entrant answers while one is in flight", async () => {
    const service = new FakeService(2);
    const { flow } = makeFlow(service);
    await flow.start("rater-b", 1);
    // two clicks landing before the first submission resolves
    await Promise.all([flow.answer("real"), flow.answer("real")]);
    expect(service.submitCalls).toBe(1);
  });

  it("resumes at the same item after a refresh", async () => {
    const service = new FakeService(4);
    const first = makeFlow(service);
    await first.flow.start("rater-c", 1, 7);
    await first.flow.answer("real");
    const before = first.flow.current();
    expect(before.kind).toBe("item");
    const itemBefore = before.kind === "item" ? before.item.item_id : null;

    // refresh: a brand-new flow (new page) with the same identity
    const second = makeFlow(service);
    await second.flow.start("rater-c", 1, 7);
    const after = second.flow.current();
    expect(after.kind).toBe("item");
    if (after.kind === "item") {
      expect(after.item.item_id).toBe(itemBefore);
      expect(after.item.progress.answered).toBe(1);
    }
  });

  it("re-syncs from the server on conflict responses", async () => {
    const service = new FakeService(2);
    const { flow } = makeFlow(service);
    await flow.start("rater-d", 1);
    const state = flow.current();
    const itemId = state.kind === "item" ? state.item.item_id! : "";
    // answer out of band, then the UI tries the now-stale item
    await service.fetch("http://svc/sessions/rater-d:1:0/answers", {
      method: "POST",
      body: JSON.stringify({ item_id: itemId, answer: "real" }),
    });
    await flow.answer("synthetic");
    const next = flow.current();
    expect(next.kind).toBe("item");
    if (next.kind === "item") {
      expect(next.item.progress.answered).toBe(1);
    }
  });

  it("surfaces network errors with a retry handle", async () => {
    const failing = async (): Promise<Response> => {
      throw new Error("connection refused");
    };
    const api = new VttApi("http://svc", failing as typeof fetch);
    const states: FlowState[] = [];
    const flow = new SessionFlow(api, (s) => states.push(s));
    await flow.start("rater-e", 1);
    const state = flow.current();
    expect(state.kind).toBe("error");
    if (state.kind === "error") {
      expect(state.retry).not.toBeNull();
    }
  });
});

describe("blinding guard", () => {
  it("accepts clean payloads", () => {
    expect(() =>
      assertBlinded({ item_id: "x", progress: { answered: 0, total: 10 } }),
    ).not.toThrow();
  });

  it("rejects payloads with a truth field at any depth", () => {
    expect(() => assertBlinded({ item: { truth: "real" } })).toThrow(/blinding/);
    expect(() => assertBlinded([{ nested: [{ truth: "synthetic" }] }])).toThrow(/blinding/);
  });

  it("every payload the fake service produced was blinded", async () => {
    const service = new FakeService(4);
    const { flow } = makeFlow(service);
    await flow.start("rater-f", 1);
    await flow.answer("real");
    for (const payload of service.payloadLog) {
      const hasReportRows =
        payload !== null && typeof payload === "object" && "rows" in (payload as object);
      if (!hasReportRows) {
        expect(() => assertBlinded(payload)).not.toThrow();
      }
    }
  });
});
