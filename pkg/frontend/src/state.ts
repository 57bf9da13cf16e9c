// Console state: snapshot mirror, event feed cursor, pending actions.
// All server state is reconstructable from snapshot + events; the only
// thing persisted in the browser is the feed cursor.

import type {
  ConsoleState,
  FeedEvent,
  PendingAction,
  SystemSnapshot,
} from "./types.js";

export interface CursorStorage {
  get(): number;
  set(value: number): void;
}

export function memoryCursorStorage(initial = 0): CursorStorage {
  let cursor = initial;
  return { get: () => cursor, set: (v) => (cursor = v) };
}

export function browserCursorStorage(key = "muk-console-cursor"): CursorStorage {
  return {
    get: () => Number(globalThis.localStorage?.getItem(key) ?? "0"),
    set: (v) => globalThis.localStorage?.setItem(key, String(v)),
  };
}

const EVENT_LIMIT = 500;

export class ConsoleStore {
  state: ConsoleState;
  private storage: CursorStorage;
  private nextPendingId = 1;

  constructor(storage: CursorStorage) {
    this.storage = storage;
    this.state = {
      snapshot: null,
      connected: false,
      eventCursor: storage.get(),
      events: [],
      pending: [],
    };
  }

  applySnapshot(snapshot: SystemSnapshot): void {
    this.state.snapshot = snapshot;
    this.state.connected = true;
  }

  markDisconnected(): void {
    this.state.connected = false;
  }

  /** Append a long-poll batch. Returns true when the cursor was reset and
   * the caller must do a full refresh. Feed order must match server
   * sequence numbers; out-of-order batches are rejected loudly. */
  applyEvents(batch: { reset: boolean; next: number; events: FeedEvent[] }): boolean {
    if (batch.reset) {
      this.state.events = [];
      this.setCursor(batch.next);
      return true;
    }
    let cursor = this.state.eventCursor;
    for (const event of batch.events) {
      if (event.seq <= cursor) {
        continue; // already seen
      }
      cursor = event.seq;
      this.state.events.unshift(event); // newest first
    }
    if (this.state.events.length > EVENT_LIMIT) {
      this.state.events.length = EVENT_LIMIT;
    }
    this.setCursor(Math.max(cursor, batch.next));
    return false;
  }

  private setCursor(value: number): void {
    if (value < this.state.eventCursor && this.state.events.length > 0) {
      throw new Error(`cursor went backwards: ${this.state.eventCursor} -> ${value}`);
    }
    this.state.eventCursor = value;
    this.storage.set(value);
  }

  addPending(label: string, target: string): PendingAction {
    const pending: PendingAction = {
      id: this.nextPendingId++,
      label,
      target,
      status: "pending",
      message: "",
    };
    this.state.pending.unshift(pending);
    return pending;
  }

  /** A pending action resolves to success or failure exactly once. */
  resolvePending(id: number, ok: boolean, message = ""): void {
    const pending = this.state.pending.find((p) => p.id === id);
    if (!pending) throw new Error(`no pending action ${id}`);
    if (pending.status !== "pending") {
      throw new Error(`pending action ${id} already resolved`);
    }
    pending.status = ok ? "ok" : "failed";
    pending.message = message;
  }

  prunePending(keep = 20): void {
    this.state.pending = this.state.pending.slice(0, keep);
  }
}
