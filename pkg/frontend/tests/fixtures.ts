import type { QueryResponse, TraceRow } from "../src/api.js";

/** Captured API response shape for a 5-result query where the first tile is
 * the indexed copy of the query image itself. */
export const queryFixture: QueryResponse = {
  results: [
    { image_id: "img_03", score: 1.0, url: "/images/run1/img_03" },
    { image_id: "img_01", score: 0.99321, url: "/images/run1/img_01" },
    { image_id: "img_04", score: 0.97215, url: "/images/run1/img_04" },
    { image_id: "img_00", score: 0.912345, url: "/images/run1/img_00" },
    { image_id: "img_02", score: 0.41, url: "/images/run1/img_02" },
  ],
  query_digest: "fixture-digest",
};

export function traceFixture(n: number): TraceRow[] {
  const rows: TraceRow[] = [];
  for (let i = 0; i < n; i++) {
    rows.push({
      iter: i,
      epoch: Math.floor(i / 10),
      l_d: 1.4 - i * 0.001,
      reward: 0.15 + (0.1 * i) / n, // monotone increasing
      l_d_mod: 1.25 - i * 0.002,
      l_g: 0.7 + 0.001 * i,
      mean_sim: 0.5 + (0.3 * i) / n,
    });
  }
  return rows;
}

export const tsneCsvFixture = [
  "x,y,source",
  "-1.5,2.0,real",
  "0.5,0.25,real",
  "3.25,-1.0,generated",
  "2.0,4.5,generated",
].join("\n");
