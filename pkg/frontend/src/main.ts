import { VttApi } from "./api.js";
import { SessionFlow } from "./flow.js";
import { buildLayout, render, wire } from "./ui.js";

const root = document.getElementById("app");
if (root) {
  buildLayout(root);
  const api = new VttApi("");
  const flow = new SessionFlow(api, (state) => render(root, state));
  wire(root, flow);
  render(root, flow.current());
}
