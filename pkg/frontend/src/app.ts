// Console wiring: one snapshot poll loop (2 s), one long-poll event loop,
// action buttons with confirmation on destructive commands. All state is
// reconstructable from snapshot + events; only the feed cursor persists.

import { ApiClient, ApiError } from "./api.js";
import { browserCursorStorage, ConsoleStore } from "./state.js";
import {
  renderAlerts,
  renderEvents,
  renderInstances,
  renderModules,
  renderPending,
  renderTopBar,
} from "./render.js";
import { validateAlertRule } from "./validate.js";
import type { AlertRule, ConsoleAction } from "./types.js";

const SNAPSHOT_INTERVAL_MS = 2000;
const LONG_POLL_TIMEOUT_S = 20;

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

export class ConsoleApp {
  api: ApiClient;
  store: ConsoleStore;
  confirmFn: (message: string) => boolean;
  private stopped = false;

  constructor(api: ApiClient, store: ConsoleStore,
              confirmFn: (message: string) => boolean = (m) => globalThis.confirm(m)) {
    this.api = api;
    this.store = store;
    this.confirmFn = confirmFn;
  }

  render(): void {
    if (typeof document === "undefined" || !document.getElementById("topbar")) {
      return; // headless (tests): state is inspected directly
    }
    el("topbar").innerHTML = renderTopBar(this.store.state);
    el("modules").innerHTML = renderModules(this.store.state.snapshot);
    el("instances").innerHTML = renderInstances(this.store.state.snapshot);
    el("alerts").innerHTML = renderAlerts(this.store.state.snapshot);
    el("events").innerHTML = renderEvents(this.store.state.events);
    el("pending").innerHTML = renderPending(this.store.state.pending);
  }

  async refreshSnapshot(): Promise<void> {
    try {
      this.store.applySnapshot(await this.api.snapshot());
    } catch {
      this.store.markDisconnected();
    }
    this.render();
  }

  async pollEventsOnce(): Promise<void> {
    try {
      const batch = await this.api.events(this.store.state.eventCursor,
                                          LONG_POLL_TIMEOUT_S);
      const reset = this.store.applyEvents(batch);
      if (reset) await this.refreshSnapshot(); // server cursor reset: reload
      this.render();
    } catch {
      this.store.markDisconnected();
      this.render();
      await new Promise((resolve) => setTimeout(resolve, 1000));
    }
  }

  /** Destructive actions require operator confirmation before any request
   * is sent; every action becomes a pending row that resolves exactly once. */
  async apply(action: ConsoleAction): Promise<boolean> {
    const destructive = action.kind === "Rollback" || action.kind === "Restart";
    const label = describe(action);
    if (destructive && !this.confirmFn(`Really ${label}?`)) {
      return false;
    }
    const pending = this.store.addPending(label, target(action));
    this.render();
    try {
      await this.send(action);
      this.store.resolvePending(pending.id, true);
      await this.refreshSnapshot(); // reconcile optimistic row with reality
      return true;
    } catch (error) {
      const message = error instanceof ApiError
        ? `${error.status} ${error.message}`
        : String(error);
      this.store.resolvePending(pending.id, false, message);
      this.render();
      return false;
    }
  }

  private send(action: ConsoleAction): Promise<unknown> {
    switch (action.kind) {
      case "Scale":
        return this.api.scale(action.module, action.replicas);
      case "Rollback":
        return this.api.rollback(action.module);
      case "Deploy":
        return this.api.deploy(action.module, action.version, action.artifact);
      case "Restart":
        return this.api.restartInstance(action.instance);
      case "MapekMode":
        return this.api.setMapekMode(action.mode);
    }
  }

  async submitAlertRule(raw: Partial<AlertRule>): Promise<string[]> {
    const errors = validateAlertRule(raw);
    if (errors.length > 0) {
      return errors.map((e) => `${e.field}: ${e.message}`);
    }
    try {
      await this.api.putAlertRules([raw as AlertRule]);
      await this.refreshSnapshot();
      return [];
    } catch (error) {
      const message = error instanceof ApiError ? error.message : String(error);
      return [`server: ${message}`];
    }
  }

  bindClicks(root: HTMLElement): void {
    root.addEventListener("click", (raw) => {
      const button = (raw.target as HTMLElement).closest("button[data-action]");
      if (!button) return;
      const data = (button as HTMLElement).dataset;
      switch (data.action) {
        case "scale": {
          const replicas = Number(globalThis.prompt(`Scale ${data.module} to:`, "2"));
          if (Number.isInteger(replicas) && replicas >= 1) {
            void this.apply({ kind: "Scale", module: data.module!, replicas });
          }
          break;
        }
        case "deploy": {
          const version = globalThis.prompt(`New version for ${data.module}:`);
          const artifact = version
            ? globalThis.prompt("artifact_ref:", "")
            : null;
          if (version && artifact) {
            void this.apply({ kind: "Deploy", module: data.module!, version, artifact });
          }
          break;
        }
        case "rollback":
          void this.apply({ kind: "Rollback", module: data.module! });
          break;
        case "restart":
          void this.apply({ kind: "Restart", instance: data.instance! });
          break;
        case "mapek-mode":
          void this.apply({ kind: "MapekMode", mode: data.mode! });
          break;
      }
    });
  }

  start(): void {
    void this.refreshSnapshot();
    const snapshotTimer = setInterval(() => {
      if (!this.stopped) void this.refreshSnapshot();
    }, SNAPSHOT_INTERVAL_MS);
    const pollLoop = async () => {
      while (!this.stopped) {
        await this.pollEventsOnce();
      }
    };
    void pollLoop();
    globalThis.addEventListener?.("beforeunload", () => {
      this.stopped = true;
      clearInterval(snapshotTimer);
    });
  }
}

function describe(action: ConsoleAction): string {
  switch (action.kind) {
    case "Scale": return `scale ${action.module} to ${action.replicas}`;
    case "Rollback": return `roll back ${action.module}`;
    case "Deploy": return `deploy ${action.module} v${action.version}`;
    case "Restart": return `restart ${action.instance}`;
    case "MapekMode": return `set MAPE-K mode to ${action.mode}`;
  }
}

function target(action: ConsoleAction): string {
  switch (action.kind) {
    case "Scale":
    case "Rollback":
    case "Deploy":
      return action.module;
    case "Restart":
      return action.instance;
    case "MapekMode":
      return "kernel";
  }
}

export function mount(): void {
  const base = (document.querySelector("meta[name=muk-admin]") as HTMLMetaElement)
    ?.content ?? "";
  const token = globalThis.localStorage?.getItem("muk-console-token") ?? null;
  const app = new ConsoleApp(new ApiClient(base, token),
                             new ConsoleStore(browserCursorStorage()));
  app.bindClicks(document.body);
  const modeForm = document.getElementById("mode-buttons");
  if (modeForm) {
    for (const mode of ["mapek", "baseline", "off"]) {
      const button = document.createElement("button");
      button.textContent = mode;
      button.dataset.action = "mapek-mode";
      button.dataset.mode = mode;
      modeForm.appendChild(button);
    }
  }
  app.start();
}

if (typeof document !== "undefined" && document.getElementById("topbar")) {
  mount();
}
