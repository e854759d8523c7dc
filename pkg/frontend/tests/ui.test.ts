import { beforeEach, describe, expect, it } from "vitest";

import { VttApi } from "../src/api.js";
import { SessionFlow } from "../src/flow.js";
import { buildLayout, render, wire } from "../src/ui.js";
import { FakeService } from "./fake-service.js";

function mount(service: FakeService): { root: HTMLElement; flow: SessionFlow } {
  document.body.innerHTML = '<div id="app"></div>';
  const root = document.getElementById("app")!;
  buildLayout(root);
  const api = new VttApi("http://svc", service.fetch);
  const flow = new SessionFlow(api, (state) => render(root, state));
  wire(root, flow);
  render(root, flow.current());
  return { root, flow };
}

function click(root: HTMLElement, selector: string): void {
  root.querySelector<HTMLButtonElement>(selector)!.click();
}

async function settle(): Promise<void> {
  // let queued promise chains resolve
  for (let i = 0; i < 10; i += 1) {
    await Promise.resolve();
  }
  await new Promise((resolve) => setTimeout(resolve, 0));
}

describe("study UI", () => {
  let service: FakeService;
  let root: HTMLElement;
  let flow: SessionFlow;

  beforeEach(async () => {
    service = new FakeService(4);
    ({ root, flow } = mount(service));
    root.querySelector<HTMLInputElement>("#rater-id")!.value = "ui-rater";
    click(root, "#start-button");
    await settle();
  });

  it("shows the three center views side by side", () => {
    expect(root.querySelector<HTMLElement>("#study-panel")!.hidden).toBe(false);
    for (const view of ["axial", "coronal", "sagittal"]) {
      const img = root.querySelector<HTMLImageElement>(`#${view}-view`)!;
      expect(img.src.startsWith("data:image/png;base64,")).toBe(true);
    }
  });

  it("answer buttons submit and advance progress", async () => {
    click(root, "#answer-real");
    await settle();
    expect(root.querySelector("#progress-text")!.textContent).toBe("1 / 4");
  });

  it("keyboard shortcuts R and S submit like clicks", async () => {
    document.dispatchEvent(new KeyboardEvent("keydown", { key: "r" }));
    await settle();
    document.dispatchEvent(new KeyboardEvent("keydown", { key: "S" }));
    await settle();
    expect(service.submitCalls).toBe(2);
    expect(root.querySelector("#progress-text")!.textContent).toBe("2 / 4");
    const session = service.sessions.get("ui-rater:1:0")!;
    expect([...session.answers.values()]).toEqual(["real", "synthetic"]);
  });

  it("double clicks produce exactly one request", async () => {
    const button = root.querySelector<HTMLButtonElement>("#answer-real")!;
    button.click();
    button.click();
    await settle();
    expect(service.submitCalls).toBe(1);
    expect(root.querySelector("#progress-text")!.textContent).toBe("1 / 4");
  });

  it("completing every item reveals the report table", async () => {
    for (let i = 0; i < 4; i += 1) {
      click(root, "#answer-real");
      await settle();
    }
    expect(root.querySelector<HTMLElement>("#report-panel")!.hidden).toBe(false);
    const cells = [...root.querySelectorAll("#report-table tbody td")].map(
      (td) => td.textContent,
    );
    expect(cells[0]).toBe("ui-rater");
    expect(cells[1]).toBe("50%"); // answered real on a 2/2 mix
  });

  it("never renders or logs a truth label", async () => {
    click(root, "#answer-real");
    await settle();
    expect(root.innerHTML).not.toContain("truth");
  });
});
