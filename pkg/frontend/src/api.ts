/** Typed client for the similarity service HTTP API.
 *
 * Every number the UI shows comes from these responses; the frontend never
 * computes a similarity itself.
 */

export interface IndexInfo {
  index_id: string;
  size: number;
  extractor_digest: string;
  created_at: string;
}

export interface QueryResultEntry {
  image_id: string;
  score: number;
  url: string;
}

export interface QueryResponse {
  results: QueryResultEntry[];
  query_digest: string;
}

export interface TraceRow {
  iter: number;
  epoch: number;
  l_d: number;
  reward: number;
  l_d_mod: number;
  l_g: number;
  mean_sim: number;
}

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
  }
}

async function asJson<T>(res: Response): Promise<T> {
  if (!res.ok) {
    let detail = res.statusText;
    try {
      const body = await res.json();
      if (typeof body.detail === "string") detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(res.status, detail);
  }
  return res.json() as Promise<T>;
}

export class ApiClient {
  constructor(
    readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  health(): Promise<{ status: string; version: string }> {
    return this.fetchFn(`${this.baseUrl}/health`).then((r) => asJson(r));
  }

  listIndexes(): Promise<IndexInfo[]> {
    return this.fetchFn(`${this.baseUrl}/indexes`).then((r) => asJson(r));
  }

  async query(image: Blob, indexId: string, k: number): Promise<QueryResponse> {
    const form = new FormData();
    form.append("image", image, "query.png");
    form.append("index_id", indexId);
    form.append("k", String(k));
    const res = await this.fetchFn(`${this.baseUrl}/query`, {
      method: "POST",
      body: form,
    });
    return asJson(res);
  }

  listRuns(): Promise<string[]> {
    return this.fetchFn(`${this.baseUrl}/runs`).then((r) => asJson(r));
  }

  rewards(runId: string): Promise<TraceRow[]> {
    return this.fetchFn(`${this.baseUrl}/runs/${runId}/rewards`).then((r) =>
      asJson(r),
    );
  }

  async tsneCsv(runId: string): Promise<string> {
    const res = await this.fetchFn(`${this.baseUrl}/runs/${runId}/tsne`);
    if (!res.ok) throw new ApiError(res.status, res.statusText);
    return res.text();
  }

  imageUrl(relative: string): string {
    return `${this.baseUrl}${relative}`;
  }
}
