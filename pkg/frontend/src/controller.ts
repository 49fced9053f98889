/** Query submission with latest-wins semantics: an in-flight query is
 * superseded by any later submission, and errors never leave a stale grid
 * on screen.
 */

import type { ApiClient, QueryResponse } from "./api.js";
import { buildQueryView, QueryView } from "./views.js";

export type QueryOutcome =
  | { kind: "view"; view: QueryView }
  | { kind: "error"; message: string }
  | { kind: "superseded" };

export class QueryController {
  private ticket = 0;

  constructor(private readonly api: ApiClient) {}

  async submit(image: Blob, indexId: string, k: number): Promise<QueryOutcome> {
    const myTicket = ++this.ticket;
    let response: QueryResponse;
    try {
      response = await this.api.query(image, indexId, k);
    } catch (err) {
      if (myTicket !== this.ticket) return { kind: "superseded" };
      const message = err instanceof Error ? err.message : String(err);
      return { kind: "error", message };
    }
    if (myTicket !== this.ticket) return { kind: "superseded" };
    return { kind: "view", view: buildQueryView(response, k) };
  }
}
