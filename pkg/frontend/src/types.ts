// Shapes of the kernel admin API payloads the console consumes.

export interface InstanceInfo {
  instance_id: string;
  module_id: string;
  version: string;
  state: string;
  started_at: number;
  active_requests: number;
  restart_count: number;
  consecutive_failures: number;
  heals: string[];
}

export interface ModuleHealth {
  name: string;
  version: string;
  paradigm: string;
  demand_loaded: boolean;
  resident: boolean;
  states: Record<string, number>;
  instances: InstanceInfo[];
  p50_latency_us: number | null;
  p95_latency_us: number | null;
  throughput_rps: number;
  error_rate: number;
  restarts_total: number;
}

export interface AlertRule {
  rule_id: string;
  metric: string;
  aggregation: string;
  window_s: number;
  threshold: number;
  direction: string;
  target: string;
}

export interface SystemSnapshot {
  at: number;
  window_s: number;
  modules: Record<string, ModuleHealth>;
  alerts: { rules: AlertRule[]; states: Record<string, boolean> };
  queue_depths: Record<string, number>;
  mapek_mode: string;
  drops: Record<string, number>;
  event_seq: number;
}

export interface FeedEvent {
  seq: number;
  kind: string; // "alert" | "mapek"
  at: number;
  payload: Record<string, unknown>;
}

export interface EventBatch {
  reset: boolean;
  next: number;
  events: FeedEvent[];
}

export type ConsoleAction =
  | { kind: "Scale"; module: string; replicas: number }
  | { kind: "Rollback"; module: string }
  | { kind: "Deploy"; module: string; version: string; artifact: string }
  | { kind: "Restart"; instance: string }
  | { kind: "MapekMode"; mode: string };

export type PendingStatus = "pending" | "ok" | "failed";

export interface PendingAction {
  id: number;
  label: string;
  target: string;
  status: PendingStatus;
  message: string;
}

export interface ConsoleState {
  snapshot: SystemSnapshot | null;
  connected: boolean;
  eventCursor: number;
  events: FeedEvent[]; // newest first
  pending: PendingAction[];
}
