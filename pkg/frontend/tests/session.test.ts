// Session behavior: caching, threshold sweeps without network traffic,
// error handling that preserves prior state, and re-upload replacement.

import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api";
import { Session } from "../src/session";
import type { PredictResponse } from "../src/types";

const GOLDEN = JSON.parse(
  readFileSync(fileURLToPath(new URL("./fixtures/golden/golden-0-0.json", import.meta.url)), "utf8"),
) as PredictResponse;

function fakeFetch(handler: (url: string, init?: RequestInit) => Response) {
  const calls: string[] = [];
  const impl = async (url: string, init?: RequestInit) => {
    calls.push(url);
    return handler(url, init);
  };
  return { impl, calls };
}

function okResponse(body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status: 200,
    headers: { "content-type": "application/json" },
  });
}

function clientWith(handler: (url: string, init?: RequestInit) => Response) {
  const { impl, calls } = fakeFetch(handler);
  return { client: new ApiClient("", impl), calls };
}

const FILE = new Blob([new Uint8Array([137, 80, 78, 71])], { type: "image/png" });

describe("session", () => {
  it("uploads once and caches the response", async () => {
    const { client, calls } = clientWith(() => okResponse(GOLDEN));
    const session = new Session(client);
    await session.uploadAndPredict(FILE, "a.png");
    expect(calls.length).toBe(1);
    const snap = session.snapshot();
    expect(snap.response?.image_id).toBe(GOLDEN.image_id);
    expect(snap.labels).not.toBeNull();
    expect(snap.selectedRegion).toBe(0);
  });

  it("threshold sweeps issue zero additional /predict calls", async () => {
    const { client, calls } = clientWith(() => okResponse(GOLDEN));
    const session = new Session(client);
    await session.uploadAndPredict(FILE, "a.png");
    const before = calls.length;
    const seen: boolean[] = [];
    for (let t = 0; t <= 100; t++) {
      session.setThreshold(t / 100);
      seen.push(session.snapshot().labels!.implant_positive);
    }
    expect(calls.length).toBe(before); // no network traffic at all
    expect(new Set(seen).size).toBe(2); // labels actually flip across the sweep
  });

  it("labels recompute from cached probabilities as the threshold moves", async () => {
    const { client } = clientWith(() => okResponse(GOLDEN));
    const session = new Session(client);
    await session.uploadAndPredict(FILE, "a.png");
    session.setThreshold(0.0);
    expect(session.snapshot().labels!.fracture_positive).toBe(true);
    session.setThreshold(1.0);
    expect(session.snapshot().labels!.fracture_positive).toBe(false);
  });

  it("server errors surface as a banner and preserve prior state", async () => {
    let fail = false;
    const { client } = clientWith(() =>
      fail
        ? new Response(JSON.stringify({ detail: "unsupported format" }), { status: 400 })
        : okResponse(GOLDEN),
    );
    const session = new Session(client);
    await session.uploadAndPredict(FILE, "a.png");
    fail = true;
    await session.uploadAndPredict(FILE, "b.txt");
    const snap = session.snapshot();
    expect(snap.error).toContain("unsupported format");
    expect(snap.response?.image_id).toBe(GOLDEN.image_id); // prior state intact
  });

  it("re-upload replaces the prior session", async () => {
    const second: PredictResponse = { ...GOLDEN, image_id: "second" };
    let count = 0;
    const { client } = clientWith(() => okResponse(count++ === 0 ? GOLDEN : second));
    const session = new Session(client);
    await session.uploadAndPredict(FILE, "a.png");
    await session.uploadAndPredict(FILE, "b.png");
    expect(session.snapshot().response?.image_id).toBe("second");
  });

  it("rejects thresholds outside [0, 1]", () => {
    const { client } = clientWith(() => okResponse(GOLDEN));
    const session = new Session(client);
    expect(() => session.setThreshold(1.5)).toThrow();
    expect(() => session.setThreshold(-0.1)).toThrow();
  });

  it("region selection is bounds-checked", async () => {
    const { client } = clientWith(() => okResponse(GOLDEN));
    const session = new Session(client);
    await session.uploadAndPredict(FILE, "a.png");
    expect(() => session.selectRegion(99)).toThrow();
    session.selectRegion(null);
    expect(session.snapshot().selectedRegion).toBeNull();
  });
});
