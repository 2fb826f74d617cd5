import { describe, expect, it, vi } from "vitest";

import { AnnotationClient, ApiError } from "../src/api.js";

function fakeResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

describe("AnnotationClient", () => {
  it("creates sessions with a JSON body", async () => {
    const fetchFn = vi.fn().mockResolvedValue(
      fakeResponse(200, {
        session_id: "abc",
        status: "awaiting_labels",
        pending: [3, 9],
        label_names: { "0": "other", "1": "target cell type" },
      }),
    );
    const client = new AnnotationClient("http://x", fetchFn);
    const info = await client.createSession({ task: 1, budget: 8 });
    expect(info.session_id).toBe("abc");
    expect(info.pending).toEqual([3, 9]);
    const [url, init] = fetchFn.mock.calls[0]!;
    expect(url).toBe("http://x/sessions");
    expect(init.method).toBe("POST");
    expect(JSON.parse(init.body)).toEqual({ task: 1, budget: 8 });
  });

  it("submits labels to the session endpoint", async () => {
    const fetchFn = vi.fn().mockResolvedValue(
      fakeResponse(200, {
        accepted: true,
        conflict: false,
        status: "awaiting_labels",
      }),
    );
    const client = new AnnotationClient("http://x", fetchFn);
    const ack = await client.submitLabel("abc", 42, 1);
    expect(ack.accepted).toBe(true);
    const [url, init] = fetchFn.mock.calls[0]!;
    expect(url).toBe("http://x/sessions/abc/labels");
    expect(JSON.parse(init.body)).toEqual({
      sample_id: 42,
      label: 1,
      annotator: "ui",
    });
  });

  it("raises ApiError with the server detail on non-2xx", async () => {
    const fetchFn = vi
      .fn()
      .mockResolvedValue(fakeResponse(409, { detail: "sample 5 is not pending" }));
    const client = new AnnotationClient("http://x", fetchFn);
    const err = await client.submitLabel("abc", 5, 0).catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(409);
    expect(err.message).toContain("not pending");
  });

  it("tolerates non-JSON error bodies", async () => {
    const fetchFn = vi
      .fn()
      .mockResolvedValue(new Response("boom", { status: 500 }));
    const client = new AnnotationClient("http://x", fetchFn);
    const err = await client.getQueries("abc").catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(500);
  });
});
