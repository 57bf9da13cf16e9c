// Action flow: confirmation gates destructive commands, optimistic rows
// reconcile, client-side alert validation blocks bad submissions.

import { readFileSync } from "node:fs";
import { join } from "node:path";
import { afterEach, describe, expect, it, vi } from "vitest";
import { ApiClient } from "../src/api.js";
import { ConsoleApp } from "../src/app.js";
import { ConsoleStore, memoryCursorStorage } from "../src/state.js";
import { validateAlertRule } from "../src/validate.js";

const snapshot = JSON.parse(readFileSync(
  join(__dirname, "fixtures", "snapshot-healthy.json"), "utf-8"));

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), { status });
}

function makeApp(confirmAnswer: boolean, fetchMock: ReturnType<typeof vi.fn>) {
  vi.stubGlobal("fetch", fetchMock);
  return new ConsoleApp(new ApiClient("http://h:1"),
                        new ConsoleStore(memoryCursorStorage()),
                        () => confirmAnswer);
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("apply_action", () => {
  it("rollback without confirmation sends no request", async () => {
    const fetchMock = vi.fn(async () => jsonResponse({}));
    const app = makeApp(false, fetchMock);
    const applied = await app.apply({ kind: "Rollback", module: "shop" });
    expect(applied).toBe(false);
    expect(fetchMock).not.toHaveBeenCalled();
    expect(app.store.state.pending).toEqual([]);
  });

  it("scale posts and the pending row resolves ok after reconcile", async () => {
    const fetchMock = vi.fn(async (url: string) =>
      url.endsWith("/admin/snapshot") ? jsonResponse(snapshot) : jsonResponse({}));
    const app = makeApp(true, fetchMock);
    const applied = await app.apply({ kind: "Scale", module: "shop", replicas: 3 });
    expect(applied).toBe(true);

    const scaleCall = fetchMock.mock.calls.find(
      ([url]) => (url as string).includes("/scale"));
    expect(scaleCall).toBeDefined();
    expect((scaleCall![1] as RequestInit).body).toBe('{"replicas":3}');
    expect(app.store.state.pending[0].status).toBe("ok");
    // the snapshot reconcile happened
    expect(fetchMock.mock.calls.some(([url]) =>
      (url as string).endsWith("/admin/snapshot"))).toBe(true);
  });

  it("scale is not destructive: no confirmation needed", async () => {
    const fetchMock = vi.fn(async () => jsonResponse(snapshot));
    const app = makeApp(false, fetchMock); // confirm would say no
    const applied = await app.apply({ kind: "Scale", module: "shop", replicas: 2 });
    expect(applied).toBe(true);
  });

  it("API rejection turns the pending row failed with the server message", async () => {
    const fetchMock = vi.fn(async (url: string) =>
      (url as string).includes("/rollback")
        ? jsonResponse({ error: "shop has no superseded deployment",
                         code: "NothingToRollBackTo" }, 409)
        : jsonResponse(snapshot));
    const app = makeApp(true, fetchMock);
    const applied = await app.apply({ kind: "Rollback", module: "shop" });
    expect(applied).toBe(false);
    expect(app.store.state.pending[0]).toMatchObject({ status: "failed" });
    expect(app.store.state.pending[0].message)
      .toContain("shop has no superseded deployment");
  });
});

describe("event polling", () => {
  it("a server cursor reset triggers a full snapshot refresh", async () => {
    const fetchMock = vi.fn(async (url: string) =>
      (url as string).includes("/admin/events")
        ? jsonResponse({ reset: true, next: 3, events: [] })
        : jsonResponse(snapshot));
    const app = makeApp(true, fetchMock);
    app.store.state.eventCursor = 50;
    await app.pollEventsOnce();
    expect(app.store.state.eventCursor).toBe(3);
    expect(fetchMock.mock.calls.some(([url]) =>
      (url as string).endsWith("/admin/snapshot"))).toBe(true);
  });

  it("connection loss marks the console disconnected", async () => {
    const fetchMock = vi.fn(async () => {
      throw new TypeError("fetch failed");
    });
    const app = makeApp(true, fetchMock);
    await app.refreshSnapshot();
    expect(app.store.state.connected).toBe(false);
  });
});

describe("alert rule editing", () => {
  it("window_s=0 blocks the submit client-side", async () => {
    const fetchMock = vi.fn(async () => jsonResponse({}));
    const app = makeApp(true, fetchMock);
    const errors = await app.submitAlertRule({
      rule_id: "r", metric: "LatencyUs", aggregation: "P95",
      window_s: 0, threshold: 5, direction: "Above", target: "*",
    });
    expect(errors.some((e) => e.startsWith("window_s"))).toBe(true);
    expect(fetchMock).not.toHaveBeenCalled();
  });

  it("valid rule posts and server rejections surface inline", async () => {
    const fetchMock = vi.fn(async (url: string) =>
      (url as string).endsWith("/admin/alerts")
        ? jsonResponse({ error: "window_s must be > 0", code: "BadRange" }, 400)
        : jsonResponse(snapshot));
    const app = makeApp(true, fetchMock);
    const errors = await app.submitAlertRule({
      rule_id: "r", metric: "LatencyUs", aggregation: "P95",
      window_s: 30, threshold: 5, direction: "Above", target: "*",
    });
    expect(errors).toEqual(["server: window_s must be > 0"]);
  });

  it("client validation enumerates every broken field", () => {
    const errors = validateAlertRule({ window_s: -1 } as any);
    const fields = errors.map((e) => e.field).sort();
    expect(fields).toEqual(
      ["aggregation", "direction", "metric", "rule_id", "target", "threshold",
       "window_s"]);
  });
});
