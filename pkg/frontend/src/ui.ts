// DOM rendering and input wiring. Deliberately minimal: three fixed
// center views, two answer buttons (clicks or R/S keys), a progress bar,
// and the final per-rater report table.

import { Answer, Report } from "./api.js";
import { FlowState, SessionFlow } from "./flow.js";

const VIEWS = ["axial", "coronal", "sagittal"] as const;

export function buildLayout(root: HTMLElement): void {
  root.innerHTML = `
    <section id="start-panel">
      <label>Rater ID <input id="rater-id" type="text" autocomplete="off"></label>
      <label>Test
        <select id="test-id">
          <option value="1">1: nodules</option>
          <option value="2">2: nodules (reconstruction-trained)</option>
          <option value="3">3: nodules with surroundings</option>
          <option value="4">4: surroundings (reconstruction-trained)</option>
        </select>
      </label>
      <button id="start-button" type="button">Start</button>
    </section>
    <section id="study-panel" hidden>
      <div id="viewer">
        ${VIEWS.map(
          (v) => `
        <figure class="view">
          <img id="${v}-view" alt="${v} center view">
          <figcaption>${v}</figcaption>
        </figure>`,
        ).join("")}
      </div>
      <div id="controls">
        <button id="answer-real" type="button" title="shortcut: R">Real</button>
        <button id="answer-synthetic" type="button" title="shortcut: S">Synthetic</button>
      </div>
      <div id="progress">
        <progress id="progress-bar" value="0" max="100"></progress>
        <span id="progress-text"></span>
      </div>
    </section>
    <section id="report-panel" hidden>
      <h2>Session complete</h2>
      <table id="report-table">
        <thead>
          <tr><th>Rater</th><th>Accuracy</th><th>Real as real</th>
          <th>Real as synthetic</th><th>Synthetic as real</th><th>Synthetic as synthetic</th></tr>
        </thead>
        <tbody></tbody>
      </table>
    </section>
    <section id="status-panel" hidden>
      <p id="status-message"></p>
      <button id="retry-button" type="button" hidden>Retry</button>
    </section>
  `;
}

function show(root: HTMLElement, panel: string): void {
  for (const id of ["start-panel", "study-panel", "report-panel", "status-panel"]) {
    const el = root.querySelector<HTMLElement>(`#${id}`);
    if (el) {
      el.hidden = id !== panel;
    }
  }
}

function renderReport(root: HTMLElement, report: Report): void {
  const tbody = root.querySelector<HTMLTableSectionElement>("#report-table tbody");
  if (!tbody) {
    return;
  }
  tbody.innerHTML = "";
  for (const row of report.rows) {
    const tr = document.createElement("tr");
    const accuracy = `${(row.accuracy * 100).toFixed(0)}%`;
    for (const cell of [
      row.rater,
      accuracy,
      String(row.real_as_real),
      String(row.real_as_synt),
      String(row.synt_as_real),
      String(row.synt_as_synt),
    ]) {
      const td = document.createElement("td");
      td.textContent = cell;
      tr.appendChild(td);
    }
    tbody.appendChild(tr);
  }
}

export function render(root: HTMLElement, state: FlowState): void {
  switch (state.kind) {
    case "idle":
      show(root, "start-panel");
      break;
    case "loading": {
      show(root, "status-panel");
      const msg = root.querySelector<HTMLElement>("#status-message");
      if (msg) {
        msg.textContent = state.message;
      }
      root.querySelector<HTMLElement>("#retry-button")?.setAttribute("hidden", "");
      break;
    }
    case "item": {
      show(root, "study-panel");
      const { item, submitting } = state;
      for (const view of VIEWS) {
        const img = root.querySelector<HTMLImageElement>(`#${view}-view`);
        const data = item[`${view}_png`];
        if (img && data) {
          img.src = `data:image/png;base64,${data}`;
        }
      }
      const bar = root.querySelector<HTMLProgressElement>("#progress-bar");
      const text = root.querySelector<HTMLElement>("#progress-text");
      if (bar) {
        bar.max = item.progress.total;
        bar.value = item.progress.answered;
      }
      if (text) {
        text.textContent = `${item.progress.answered} / ${item.progress.total}`;
      }
      for (const id of ["answer-real", "answer-synthetic"]) {
        const button = root.querySelector<HTMLButtonElement>(`#${id}`);
        if (button) {
          button.disabled = submitting;
        }
      }
      break;
    }
    case "completed":
      show(root, "report-panel");
      renderReport(root, state.report);
      break;
    case "error": {
      show(root, "status-panel");
      const msg = root.querySelector<HTMLElement>("#status-message");
      if (msg) {
        msg.textContent = `error: ${state.message}`;
      }
      const retry = root.querySelector<HTMLButtonElement>("#retry-button");
      if (retry) {
        retry.hidden = state.retry === null;
      }
      break;
    }
  }
}

export interface WiredUi {
  flow: SessionFlow;
}

export function wire(root: HTMLElement, flow: SessionFlow): WiredUi {
  const answer = (value: Answer): void => {
    void flow.answer(value);
  };
  root.querySelector<HTMLButtonElement>("#answer-real")?.addEventListener("click", () =>
    answer("real"),
  );
  root.querySelector<HTMLButtonElement>("#answer-synthetic")?.addEventListener("click", () =>
    answer("synthetic"),
  );
  root.querySelector<HTMLButtonElement>("#start-button")?.addEventListener("click", () => {
    const rater = root.querySelector<HTMLInputElement>("#rater-id")?.value.trim() ?? "";
    const test = Number(root.querySelector<HTMLSelectElement>("#test-id")?.value ?? "1");
    if (rater) {
      void flow.start(rater, test);
    }
  });
  root.querySelector<HTMLButtonElement>("#retry-button")?.addEventListener("click", () => {
    const state = flow.current();
    if (state.kind === "error" && state.retry) {
      void state.retry();
    }
  });
  document.addEventListener("keydown", (event) => {
    if (event.key === "r" || event.key === "R") {
      answer("real");
    } else if (event.key === "s" || event.key === "S") {
      answer("synthetic");
    }
  });
  return { flow };
}
