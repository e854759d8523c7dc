// End-to-end study flow against the real Python service: build a fixture
// pool, launch `vtt-serve`, and drive the DOM through a full 100-item
// session. Asserts blinding on every live payload, refresh-resume, and
// that the final report equals statistics recomputed from the submitted
// answers.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { createHash } from "node:crypto";
import { mkdtempSync, readdirSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { VttApi, assertBlinded, type Answer } from "../src/api.js";
import { SessionFlow } from "../src/flow.js";
import { buildLayout, render, wire } from "../src/ui.js";

const PORT = 18734;
const BASE = `http://127.0.0.1:${PORT}`;

let serverProc: ChildProcess | null = null;
let workDir: string;
let truthById: Map<string, Answer>;

function itemId(testId: number, truth: string, stem: string): string {
  return createHash("sha1").update(`${testId}/${truth}/${stem}`).digest("hex").slice(0, 16);
}

async function waitForServer(timeoutMs = 30_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const r = await fetch(`${BASE}/reports/1`);
      if (r.ok) {
        return;
      }
    } catch {
      // not up yet
    }
    await new Promise((resolve) => setTimeout(resolve, 250));
  }
  throw new Error("service did not come up in time");
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "vtt-ui-"));
  const poolDir = join(workDir, "pool");
  const made = spawnSync("python3", [join(__dirname, "make_fixture_pool.py"), poolDir, "50"], {
    encoding: "utf-8",
  });
  if (made.status !== 0) {
    throw new Error(`fixture pool failed: ${made.stderr}`);
  }

  // the ids the service will use, derived from the pool layout
  truthById = new Map();
  for (const truth of ["real", "synthetic"] as const) {
    for (const file of readdirSync(join(poolDir, "test1", truth))) {
      if (file.endsWith(".f32")) {
        truthById.set(itemId(1, truth, file.replace(/\.f32$/, "")), truth);
      }
    }
  }

  serverProc = spawn(
    "python3",
    [
      "-m", "noduleaug.cli", "vtt-serve",
      "--pool", poolDir,
      "--data", join(workDir, "data"),
      "--port", String(PORT),
      "--items-per-class", "50",
    ],
    { stdio: "ignore" },
  );
  await waitForServer();
}, 120_000);

afterAll(() => {
  serverProc?.kill("SIGTERM");
  rmSync(workDir, { recursive: true, force: true });
});

describe("full study session against the live service", () => {
  it("completes 100 items, stays blinded, resumes on refresh, and reports exactly", async () => {
    const livePayloads: unknown[] = [];
    const loggingFetch: typeof fetch = async (input, init) => {
      const response = await fetch(input, init);
      const clone = response.clone();
      const body = await clone.json().catch(() => null);
      const url = typeof input === "string" ? input : input.toString();
      if (body !== null && !url.includes("/reports/")) {
        livePayloads.push(body);
      }
      return response;
    };

    const mount = () => {
      document.body.innerHTML = '<div id="app"></div>';
      const root = document.getElementById("app")!;
      buildLayout(root);
      const api = new VttApi(BASE, loggingFetch);
      const flow = new SessionFlow(api, (state) => render(root, state));
      wire(root, flow);
      return { root, flow };
    };

    const submitted: Array<{ itemId: string; answer: Answer }> = [];
    const answerCurrent = async (flow: SessionFlow): Promise<boolean> => {
      const state = flow.current();
      if (state.kind !== "item" || !state.item.item_id) {
        return false;
      }
      // deterministic rater policy tied to the (hidden) item identity
      const answer: Answer =
        parseInt(state.item.item_id.slice(0, 2), 16) % 2 === 0 ? "real" : "synthetic";
      submitted.push({ itemId: state.item.item_id, answer });
      await flow.answer(answer);
      return true;
    };

    // first page: answer 40 items
    let { root, flow } = mount();
    await flow.start("integration-rater", 1, 11);
    expect(flow.current().kind).toBe("item");
    for (let i = 0; i < 40; i += 1) {
      expect(await answerCurrent(flow)).toBe(true);
    }
    const midState = flow.current();
    expect(midState.kind).toBe("item");
    const midItem = midState.kind === "item" ? midState.item.item_id : null;
    expect(root.querySelector("#progress-text")!.textContent).toBe("40 / 100");

    // refresh: new page, same identity; resumes at the same item
    ({ root, flow } = mount());
    await flow.start("integration-rater", 1, 11);
    const resumed = flow.current();
    expect(resumed.kind).toBe("item");
    if (resumed.kind === "item") {
      expect(resumed.item.item_id).toBe(midItem);
      expect(resumed.item.progress.answered).toBe(40);
    }

    // finish the session through the DOM-wired flow
    for (let i = 0; i < 60; i += 1) {
      expect(await answerCurrent(flow)).toBe(true);
    }
    const done = flow.current();
    expect(done.kind).toBe("completed");
    expect(submitted).toHaveLength(100);
    expect(root.querySelector<HTMLElement>("#report-panel")!.hidden).toBe(false);

    // every live payload was blinded and free of truth markers
    expect(livePayloads.length).toBeGreaterThanOrEqual(200);
    for (const payload of livePayloads) {
      assertBlinded(payload);
    }
    const flat = JSON.stringify(livePayloads);
    expect(flat).not.toContain('"truth"');

    // the report equals statistics recomputed from what we submitted
    const expected = { rr: 0, rs: 0, sr: 0, ss: 0 };
    for (const { itemId: id, answer } of submitted) {
      const truth = truthById.get(id);
      expect(truth).toBeDefined();
      if (truth === "real") {
        answer === "real" ? (expected.rr += 1) : (expected.rs += 1);
      } else {
        answer === "real" ? (expected.sr += 1) : (expected.ss += 1);
      }
    }
    const api = new VttApi(BASE);
    const report = await api.report(1);
    const row = report.rows.find((r) => r.rater === "integration-rater");
    expect(row).toBeDefined();
    expect(row!.real_as_real).toBe(expected.rr);
    expect(row!.real_as_synt).toBe(expected.rs);
    expect(row!.synt_as_real).toBe(expected.sr);
    expect(row!.synt_as_synt).toBe(expected.ss);
    expect(row!.accuracy).toBe((expected.rr + expected.ss) / 100);

    // the session drew 50 items of each class
    const seenTruths = submitted.map(({ itemId: id }) => truthById.get(id));
    expect(seenTruths.filter((t) => t === "real")).toHaveLength(50);
    expect(seenTruths.filter((t) => t === "synthetic")).toHaveLength(50);
  }, 180_000);
});
