// Pure HTML-string renderers: no DOM access, fully unit-testable.

import type {
  ConsoleState,
  FeedEvent,
  ModuleHealth,
  PendingAction,
  SystemSnapshot,
} from "./types.js";

export function esc(text: unknown): string {
  return String(text)
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const BAD_STATES = ["Unhealthy", "Stopping", "Stopped"];

export function moduleBadge(health: ModuleHealth): string {
  const states = health.states ?? {};
  const unhealthy = BAD_STATES.some((s) => (states[s] ?? 0) > 0);
  const degraded = (states["Degraded"] ?? 0) > 0;
  const klass = unhealthy ? "unhealthy" : degraded ? "degraded" : "healthy";
  const label = unhealthy ? "UNHEALTHY" : degraded ? "DEGRADED" : "OK";
  return `<span class="badge ${klass}">${label}</span>`;
}

function fmtLatency(us: number | null): string {
  if (us === null || us === undefined) return "–";
  return us >= 1000 ? `${(us / 1000).toFixed(1)} ms` : `${Math.round(us)} µs`;
}

export function renderTopBar(state: ConsoleState): string {
  const mode = state.snapshot?.mapek_mode ?? "?";
  const dot = state.connected ? "live" : "dead";
  const banner = state.connected
    ? ""
    : `<span class="banner">disconnected – retrying, charts frozen</span>`;
  return `
    <span class="dot ${dot}"></span>
    <h1>muk console</h1>
    <span class="mode-badge mode-${esc(mode)}">MAPE-K: ${esc(mode)}</span>
    ${banner}`;
}

export function renderModules(snapshot: SystemSnapshot | null): string {
  if (!snapshot) return `<p class="empty">no snapshot yet</p>`;
  const ids = Object.keys(snapshot.modules).sort();
  if (ids.length === 0) return `<p class="empty">no modules registered</p>`;
  const rows = ids.map((id) => {
    const health = snapshot.modules[id];
    const states = Object.entries(health.states ?? {})
      .map(([state, count]) => `${esc(state)}:${count}`)
      .join(" ");
    const actions = health.resident
      ? `<span class="resident">resident</span>`
      : `<button data-action="scale" data-module="${esc(id)}">scale</button>
         <button data-action="deploy" data-module="${esc(id)}">deploy</button>
         <button data-action="rollback" data-module="${esc(id)}" class="danger">rollback</button>`;
    return `
      <tr data-module-row="${esc(id)}">
        <td>${moduleBadge(health)}</td>
        <td class="mono">${esc(id)}</td>
        <td>${esc(health.version)}</td>
        <td>${esc(health.paradigm)}${health.demand_loaded ? " (demand)" : ""}</td>
        <td class="mono">${states || "–"}</td>
        <td>${fmtLatency(health.p50_latency_us)} / ${fmtLatency(health.p95_latency_us)}</td>
        <td>${health.throughput_rps.toFixed(1)}/s</td>
        <td>${(health.error_rate * 100).toFixed(1)}%</td>
        <td>${health.restarts_total}</td>
        <td class="actions">${actions}</td>
      </tr>`;
  });
  return `
    <table class="modules">
      <thead><tr>
        <th></th><th>module</th><th>version</th><th>paradigm</th><th>instances</th>
        <th>p50 / p95</th><th>rps</th><th>errors</th><th>restarts</th><th></th>
      </tr></thead>
      <tbody>${rows.join("")}</tbody>
    </table>`;
}

export function renderInstances(snapshot: SystemSnapshot | null): string {
  if (!snapshot) return "";
  const rows: string[] = [];
  for (const id of Object.keys(snapshot.modules).sort()) {
    for (const instance of snapshot.modules[id].instances) {
      rows.push(`
        <tr>
          <td class="mono">${esc(instance.instance_id)}</td>
          <td class="state-${esc(instance.state)}">${esc(instance.state)}</td>
          <td>${esc(instance.version)}</td>
          <td>${instance.active_requests}</td>
          <td>${instance.restart_count}</td>
          <td><button data-action="restart" class="danger"
                data-instance="${esc(instance.instance_id)}">restart</button></td>
        </tr>`);
    }
  }
  if (rows.length === 0) return `<p class="empty">no instances</p>`;
  return `
    <table class="instances">
      <thead><tr><th>instance</th><th>state</th><th>version</th>
        <th>active</th><th>restarts</th><th></th></tr></thead>
      <tbody>${rows.join("")}</tbody>
    </table>`;
}

export function eventLine(event: FeedEvent): string {
  const when = new Date(event.at * 1000).toISOString().slice(11, 19);
  if (event.kind === "alert") {
    const p = event.payload as any;
    return `<li class="event alert" data-seq="${event.seq}">
      <span class="seq">#${event.seq}</span> ${when}
      <b>alert</b> ${esc(p.rule_id)}: ${esc(p.value)} ${esc(p.direction)} ${esc(p.threshold)}
      <span class="target">${esc(p.target)}</span></li>`;
  }
  const p = event.payload as any;
  const outcomes = (p.outcomes ?? []) as any[];
  const resolved = outcomes.some((o) => o.outcome === "Resolved");
  const klass = resolved ? "mapek resolved" : "mapek";
  const summary = outcomes.length
    ? outcomes
        .map((o) => `${esc(o.action)} on <span class="mono">${esc(o.instance_id)}</span> → ${esc(o.outcome)}`)
        .join("; ")
    : `${(p.symptoms ?? []).length} symptom(s), ${(p.actions ?? []).length} action(s)`;
  return `<li class="event ${klass}" data-seq="${event.seq}">
    <span class="seq">#${event.seq}</span> ${when}
    <b>mape-k</b> cycle ${esc(p.cycle)}: ${summary}</li>`;
}

export function renderEvents(events: FeedEvent[]): string {
  if (events.length === 0) return `<p class="empty">no events yet</p>`;
  return `<ul class="events">${events.map(eventLine).join("")}</ul>`;
}

export function renderPending(pending: PendingAction[]): string {
  if (pending.length === 0) return "";
  const rows = pending.map((p) => `
    <li class="pending ${p.status}">
      ${esc(p.label)} <span class="mono">${esc(p.target)}</span>
      – ${p.status}${p.message ? `: ${esc(p.message)}` : ""}</li>`);
  return `<ul class="pending-list">${rows.join("")}</ul>`;
}

export function renderAlerts(snapshot: SystemSnapshot | null): string {
  if (!snapshot) return "";
  const rules = snapshot.alerts.rules;
  const states = snapshot.alerts.states;
  const rows = rules.map((rule) => `
    <tr class="${states[rule.rule_id] ? "breached" : ""}">
      <td class="mono">${esc(rule.rule_id)}</td>
      <td>${esc(rule.metric)} ${esc(rule.aggregation)}</td>
      <td>${esc(rule.direction)} ${esc(rule.threshold)}</td>
      <td>${esc(rule.window_s)}s</td>
      <td class="mono">${esc(rule.target)}</td>
      <td>${states[rule.rule_id] ? "BREACHED" : "ok"}</td>
    </tr>`);
  return `
    <table class="alerts">
      <thead><tr><th>rule</th><th>metric</th><th>threshold</th>
        <th>window</th><th>target</th><th>state</th></tr></thead>
      <tbody>${rows.join("")}</tbody>
    </table>`;
}
