import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { QueryController } from "../src/controller.js";
import { queryFixture } from "./fixtures.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function clientWith(fetchFn: typeof fetch): ApiClient {
  return new ApiClient("", fetchFn);
}

const blob = new Blob([new Uint8Array([137, 80, 78, 71])]);

describe("QueryController", () => {
  it("returns the built view on success", async () => {
    const controller = new QueryController(
      clientWith(async () => jsonResponse(queryFixture)),
    );
    const outcome = await controller.submit(blob, "idx", 5);
    expect(outcome.kind).toBe("view");
    if (outcome.kind === "view") {
      expect(outcome.view.tiles.map((t) => t.imageId)).toEqual(
        queryFixture.results.map((r) => r.image_id),
      );
    }
  });

  it("surfaces the server error detail, not a stale grid", async () => {
    const controller = new QueryController(
      clientWith(async () =>
        jsonResponse({ detail: "unknown index 'nope'" }, 404),
      ),
    );
    const outcome = await controller.submit(blob, "nope", 5);
    expect(outcome).toEqual({ kind: "error", message: "unknown index 'nope'" });
  });

  it("marks an overtaken request superseded so it is never rendered", async () => {
    let release: (() => void) | undefined;
    const gate = new Promise<void>((r) => (release = r));
    let call = 0;
    const controller = new QueryController(
      clientWith(async () => {
        call += 1;
        if (call === 1) await gate; // first request stalls until the second finishes
        return jsonResponse(queryFixture);
      }),
    );
    const first = controller.submit(blob, "idx", 5);
    const second = await controller.submit(blob, "idx", 3);
    expect(second.kind).toBe("view");
    release?.();
    const outcomeFirst = await first;
    expect(outcomeFirst.kind).toBe("superseded");
  });

  it("a failure of a superseded request is also silenced", async () => {
    let reject: ((err: Error) => void) | undefined;
    const gate = new Promise<Response>((_, rj) => (reject = rj));
    let call = 0;
    const controller = new QueryController(
      clientWith(async () => {
        call += 1;
        if (call === 1) return gate;
        return jsonResponse(queryFixture);
      }),
    );
    const first = controller.submit(blob, "idx", 5);
    await controller.submit(blob, "idx", 5);
    reject?.(new ApiError(500, "boom"));
    expect((await first).kind).toBe("superseded");
  });
});
