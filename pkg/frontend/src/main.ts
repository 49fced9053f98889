/** SPA entry point: three views (Query, Runs, t-SNE) wired to the service
 * API. All displayed numbers come from API responses.
 */

import { ApiClient } from "./api.js";
import { QueryController } from "./controller.js";
import {
  buildRunView,
  parseTsneCsv,
  renderError,
  renderQueryGrid,
  renderSeriesSvg,
  renderTsneSvg,
} from "./views.js";

const api = new ApiClient("");
const controller = new QueryController(api);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function showTab(name: "query" | "runs" | "tsne"): void {
  for (const tab of ["query", "runs", "tsne"]) {
    el(`view-${tab}`).hidden = tab !== name;
    el(`tab-${tab}`).classList.toggle("active", tab === name);
  }
}

async function refreshIndexes(): Promise<void> {
  const select = el<HTMLSelectElement>("index-select");
  try {
    const indexes = await api.listIndexes();
    select.innerHTML = indexes
      .map((i) => `<option value="${i.index_id}">${i.index_id} (${i.size})</option>`)
      .join("");
  } catch (err) {
    el("query-result").innerHTML = renderError(
      `cannot list indexes: ${err instanceof Error ? err.message : err}`,
    );
  }
}

async function submitQuery(): Promise<void> {
  const fileInput = el<HTMLInputElement>("query-file");
  const select = el<HTMLSelectElement>("index-select");
  const k = Number(el<HTMLInputElement>("k-input").value) || 5;
  const file = fileInput.files?.[0];
  const target = el("query-result");
  if (!file || !select.value) {
    target.innerHTML = renderError("choose an index and a query image first");
    return;
  }
  const outcome = await controller.submit(file, select.value, k);
  if (outcome.kind === "view") {
    target.innerHTML = renderQueryGrid(outcome.view);
  } else if (outcome.kind === "error") {
    target.innerHTML = renderError(outcome.message);
  }
  // superseded: a newer submission owns the grid; render nothing
}

async function refreshRuns(): Promise<void> {
  const list = el("run-list");
  try {
    const runs = await api.listRuns();
    list.innerHTML = runs
      .map((r) => `<button class="run" data-run="${r}">${r}</button>`)
      .join("");
    for (const btn of list.querySelectorAll<HTMLButtonElement>("button.run")) {
      btn.addEventListener("click", () => {
        void showRun(btn.dataset.run ?? "");
        void showTsne(btn.dataset.run ?? "");
      });
    }
  } catch (err) {
    list.innerHTML = renderError(String(err));
  }
}

async function showRun(runId: string): Promise<void> {
  const target = el("run-curves");
  try {
    const rows = await api.rewards(runId);
    const view = buildRunView(runId, rows);
    target.innerHTML =
      `<h3>${runId}</h3>` +
      `<h4>reward</h4>` +
      renderSeriesSvg(view.reward, { stroke: "#16a34a" }) +
      `<h4>discriminator loss (modified)</h4>` +
      renderSeriesSvg(view.lossD) +
      `<h4>generator loss</h4>` +
      renderSeriesSvg(view.lossG, { stroke: "#9333ea" });
  } catch (err) {
    target.innerHTML = renderError(
      err instanceof Error ? err.message : String(err),
    );
  }
}

async function showTsne(runId: string): Promise<void> {
  const target = el("tsne-plot");
  try {
    const points = parseTsneCsv(await api.tsneCsv(runId));
    target.innerHTML = `<h3>${runId}</h3>` + renderTsneSvg(points);
  } catch (err) {
    target.innerHTML = renderError(
      err instanceof Error ? err.message : String(err),
    );
  }
}

export function boot(): void {
  el("tab-query").addEventListener("click", () => showTab("query"));
  el("tab-runs").addEventListener("click", () => showTab("runs"));
  el("tab-tsne").addEventListener("click", () => showTab("tsne"));
  el("query-submit").addEventListener("click", () => void submitQuery());
  el<HTMLInputElement>("k-input").addEventListener("change", () =>
    void submitQuery(),
  );
  showTab("query");
  void refreshIndexes();
  void refreshRuns();
}

if (typeof document !== "undefined" && document.getElementById("tab-query")) {
  boot();
}
