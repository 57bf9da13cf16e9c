// Thin fetch client for the kernel admin API. Every console mutation goes
// through here, so the contract tests can pin the exact calls and bodies.

import type { AlertRule, EventBatch, SystemSnapshot } from "./types.js";

export class ApiError extends Error {
  status: number;
  code: string;

  constructor(status: number, code: string, message: string) {
    super(message);
    this.status = status;
    this.code = code;
  }
}

export class ApiClient {
  base: string;
  token: string | null;

  constructor(base: string, token: string | null = null) {
    this.base = base.replace(/\/$/, "");
    this.token = token;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = {};
    if (body !== undefined) headers["Content-Type"] = "application/json";
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    const response = await fetch(this.base + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    let payload: any = null;
    try {
      payload = await response.json();
    } catch {
      payload = null;
    }
    if (!response.ok) {
      throw new ApiError(
        response.status,
        payload?.code ?? "Unknown",
        payload?.error ?? `HTTP ${response.status}`,
      );
    }
    return payload as T;
  }

  snapshot(): Promise<SystemSnapshot> {
    return this.request("GET", "/admin/snapshot");
  }

  events(since: number, timeoutS: number): Promise<EventBatch> {
    return this.request("GET", `/admin/events?since=${since}&timeout=${timeoutS}`);
  }

  scale(module: string, replicas: number): Promise<unknown> {
    return this.request("POST", `/admin/modules/${module}/scale`, { replicas });
  }

  rollback(module: string): Promise<unknown> {
    return this.request("POST", `/admin/modules/${module}/rollback`);
  }

  deploy(module: string, version: string, artifact: string): Promise<unknown> {
    return this.request("POST", `/admin/modules/${module}/deploy`, {
      version,
      artifact_ref: artifact,
    });
  }

  restartInstance(instance: string): Promise<unknown> {
    return this.request("POST", `/admin/instances/${instance}/restart`);
  }

  setMapekMode(mode: string): Promise<unknown> {
    return this.request("POST", "/admin/mapek/mode", { mode });
  }

  putAlertRules(rules: AlertRule[]): Promise<unknown> {
    return this.request("POST", "/admin/alerts", rules);
  }
}
