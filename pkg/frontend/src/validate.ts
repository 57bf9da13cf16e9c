// Client-side shape validation for alert rules. The server stays the
// authority; this only blocks obviously broken submissions.

import type { AlertRule } from "./types.js";

const METRICS = ["LatencyUs", "Throughput", "MemoryBytes", "CpuPermille", "QueueDepth"];
const AGGREGATIONS = ["P95", "Mean", "Max", "Rate"];
const DIRECTIONS = ["Above", "Below"];

export interface FieldError {
  field: string;
  message: string;
}

export function validateAlertRule(rule: Partial<AlertRule>): FieldError[] {
  const errors: FieldError[] = [];
  if (!rule.rule_id) {
    errors.push({ field: "rule_id", message: "rule_id is required" });
  }
  if (!rule.metric || !METRICS.includes(rule.metric)) {
    errors.push({ field: "metric", message: `metric must be one of ${METRICS.join(", ")}` });
  }
  if (!rule.aggregation || !AGGREGATIONS.includes(rule.aggregation)) {
    errors.push({
      field: "aggregation",
      message: `aggregation must be one of ${AGGREGATIONS.join(", ")}`,
    });
  }
  if (typeof rule.window_s !== "number" || !(rule.window_s > 0)) {
    errors.push({ field: "window_s", message: "window_s must be > 0" });
  }
  if (typeof rule.threshold !== "number" || Number.isNaN(rule.threshold)) {
    errors.push({ field: "threshold", message: "threshold must be a number" });
  }
  if (!rule.direction || !DIRECTIONS.includes(rule.direction)) {
    errors.push({ field: "direction", message: "direction must be Above or Below" });
  }
  if (!rule.target) {
    errors.push({ field: "target", message: 'target must be a module id or "*"' });
  }
  return errors;
}
