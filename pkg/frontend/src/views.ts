/** Pure view-model builders and renderers.
 *
 * Builders turn API responses into display models without reordering,
 * resampling or recomputing anything; renderers turn models into HTML/SVG
 * strings. Keeping them pure makes the display contract directly testable.
 */

import type { QueryResponse, TraceRow } from "./api.js";

export const DUPLICATE_THRESHOLD = 0.99;

export interface QueryTile {
  imageId: string;
  score: number;
  scoreText: string; // always 4 decimals
  duplicate: boolean; // score > DUPLICATE_THRESHOLD
  url: string;
}

export interface QueryView {
  k: number;
  tiles: QueryTile[]; // same order as the API response
}

export function buildQueryView(response: QueryResponse, k: number): QueryView {
  return {
    k,
    tiles: response.results.map((r) => ({
      imageId: r.image_id,
      score: r.score,
      scoreText: r.score.toFixed(4),
      duplicate: r.score > DUPLICATE_THRESHOLD,
      url: r.url,
    })),
  };
}

export interface SeriesPoint {
  x: number;
  y: number;
}

export interface RunView {
  runId: string;
  /** One point per trace row, x = iteration index; never resampled. */
  reward: SeriesPoint[];
  lossD: SeriesPoint[];
  lossG: SeriesPoint[];
}

export function buildRunView(runId: string, rows: TraceRow[]): RunView {
  return {
    runId,
    reward: rows.map((r) => ({ x: r.iter, y: r.reward })),
    lossD: rows.map((r) => ({ x: r.iter, y: r.l_d_mod })),
    lossG: rows.map((r) => ({ x: r.iter, y: r.l_g })),
  };
}

export interface TsnePoint {
  x: number;
  y: number;
  source: string;
}

/** Parse the service's `x,y,source` CSV export. */
export function parseTsneCsv(text: string): TsnePoint[] {
  const lines = text.split(/\r?\n/).filter((l) => l.trim() !== "");
  if (lines.length === 0 || lines[0].trim() !== "x,y,source") {
    throw new Error(`unexpected t-SNE CSV header: ${lines[0] ?? "(empty)"}`);
  }
  return lines.slice(1).map((line, i) => {
    const [xs, ys, source] = line.split(",");
    const x = Number(xs);
    const y = Number(ys);
    if (!Number.isFinite(x) || !Number.isFinite(y) || !source) {
      throw new Error(`bad t-SNE CSV row ${i + 2}: ${line}`);
    }
    return { x, y, source };
  });
}

/** Legend entries in first-appearance order (real before generated in the
 * service export). */
export function legendEntries(points: TsnePoint[]): string[] {
  const seen: string[] = [];
  for (const p of points) {
    if (!seen.includes(p.source)) seen.push(p.source);
  }
  return seen;
}

// ---------------------------------------------------------------------------
// HTML / SVG renderers
// ---------------------------------------------------------------------------

function esc(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderQueryGrid(view: QueryView): string {
  const tiles = view.tiles
    .map(
      (t) => `<figure class="tile${t.duplicate ? " duplicate" : ""}" data-image-id="${esc(t.imageId)}">
  <img src="${esc(t.url)}" alt="${esc(t.imageId)}">
  <figcaption>${esc(t.imageId)} &middot; ${t.scoreText}${
    t.duplicate ? ' <span class="dup-flag" title="possible duplicate">&#9888;</span>' : ""
  }</figcaption>
</figure>`,
    )
    .join("\n");
  return `<div class="grid" data-k="${view.k}">\n${tiles}\n</div>`;
}

export function renderSeriesSvg(
  series: SeriesPoint[],
  opts: { width?: number; height?: number; stroke?: string } = {},
): string {
  const width = opts.width ?? 640;
  const height = opts.height ?? 200;
  const stroke = opts.stroke ?? "#2563eb";
  if (series.length === 0) {
    return `<svg class="series" viewBox="0 0 ${width} ${height}" data-points="0"></svg>`;
  }
  const xs = series.map((p) => p.x);
  const ys = series.map((p) => p.y);
  const xMin = Math.min(...xs);
  const xMax = Math.max(...xs);
  const yMin = Math.min(...ys);
  const yMax = Math.max(...ys);
  const sx = (x: number) =>
    xMax === xMin ? width / 2 : ((x - xMin) / (xMax - xMin)) * (width - 10) + 5;
  const sy = (y: number) =>
    yMax === yMin
      ? height / 2
      : height - (((y - yMin) / (yMax - yMin)) * (height - 10) + 5);
  const d = series
    .map((p, i) => `${i === 0 ? "M" : "L"}${sx(p.x).toFixed(1)} ${sy(p.y).toFixed(1)}`)
    .join(" ");
  const dots = series
    .map(
      (p) =>
        `<circle cx="${sx(p.x).toFixed(1)}" cy="${sy(p.y).toFixed(1)}" r="1.5"/>`,
    )
    .join("");
  return `<svg class="series" viewBox="0 0 ${width} ${height}" data-points="${series.length}"><path d="${d}" fill="none" stroke="${stroke}"/>${dots}</svg>`;
}

const TSNE_COLORS: Record<string, string> = {
  real: "#2563eb", // blue
  generated: "#dc2626", // red
};

export function renderTsneSvg(points: TsnePoint[], size = 480): string {
  if (points.length === 0) {
    return `<svg class="tsne" viewBox="0 0 ${size} ${size}" data-points="0"></svg>`;
  }
  const xs = points.map((p) => p.x);
  const ys = points.map((p) => p.y);
  const xMin = Math.min(...xs);
  const xMax = Math.max(...xs);
  const yMin = Math.min(...ys);
  const yMax = Math.max(...ys);
  const scale = (v: number, lo: number, hi: number) =>
    hi === lo ? size / 2 : ((v - lo) / (hi - lo)) * (size - 20) + 10;
  const dots = points
    .map(
      (p) =>
        `<circle cx="${scale(p.x, xMin, xMax).toFixed(1)}" cy="${scale(p.y, yMin, yMax).toFixed(1)}" r="3" fill="${TSNE_COLORS[p.source] ?? "#6b7280"}" data-source="${esc(p.source)}"/>`,
    )
    .join("");
  const legend = legendEntries(points)
    .map(
      (s, i) =>
        `<g class="legend-entry" data-source="${esc(s)}"><circle cx="12" cy="${16 + i * 18}" r="4" fill="${TSNE_COLORS[s] ?? "#6b7280"}"/><text x="22" y="${20 + i * 18}">${esc(s)}</text></g>`,
    )
    .join("");
  return `<svg class="tsne" viewBox="0 0 ${size} ${size}" data-points="${points.length}">${dots}${legend}</svg>`;
}

export function renderError(message: string): string {
  return `<p class="error" role="alert">${esc(message)}</p>`;
}
