/**
 * Event-stream client with reconnect-and-backoff. The EventSource-like
 * transport is injected so tests can drive it synchronously.
 */

import { parseEvent, StreamEvent } from "./contracts.js";

export interface EventSourceLike {
  onmessage: ((ev: { data: string }) => void) | null;
  onerror: (() => void) | null;
  close(): void;
}

export type EventSourceFactory = (url: string) => EventSourceLike;

export type ConnectionStatus = "connecting" | "open" | "reconnecting" | "closed";

export interface StreamClientOptions {
  url: string;
  factory: EventSourceFactory;
  onEvent: (event: StreamEvent) => void;
  onStatus?: (status: ConnectionStatus) => void;
  onEnd?: () => void;
  /** first retry delay; doubles per failure up to maxBackoffMs */
  initialBackoffMs?: number;
  maxBackoffMs?: number;
  schedule?: (fn: () => void, ms: number) => void;
}

export class StreamClient {
  private source: EventSourceLike | null = null;
  private backoffMs: number;
  private readonly initialBackoffMs: number;
  private readonly maxBackoffMs: number;
  private closed = false;
  readonly options: StreamClientOptions;

  constructor(options: StreamClientOptions) {
    this.options = options;
    this.initialBackoffMs = options.initialBackoffMs ?? 500;
    this.maxBackoffMs = options.maxBackoffMs ?? 10_000;
    this.backoffMs = this.initialBackoffMs;
  }

  get currentBackoffMs(): number {
    return this.backoffMs;
  }

  connect(): void {
    if (this.closed) return;
    this.options.onStatus?.("connecting");
    this.source = this.options.factory(this.options.url);
    this.source.onmessage = (ev) => {
      this.backoffMs = this.initialBackoffMs; // healthy again
      this.options.onStatus?.("open");
      let raw: unknown;
      try {
        raw = JSON.parse(ev.data);
      } catch {
        return; // keep-alives and malformed lines are not events
      }
      if (
        raw !== null &&
        typeof raw === "object" &&
        Object.keys(raw).length === 0
      ) {
        this.options.onEnd?.();
        this.close();
        return;
      }
      const parsed = parseEvent(raw);
      if (parsed.ok) this.options.onEvent(parsed.value);
    };
    this.source.onerror = () => {
      if (this.closed) return;
      this.source?.close();
      this.source = null;
      this.options.onStatus?.("reconnecting");
      const wait = this.backoffMs;
      this.backoffMs = Math.min(this.backoffMs * 2, this.maxBackoffMs);
      const schedule =
        this.options.schedule ?? ((fn: () => void, ms: number) => {
          setTimeout(fn, ms);
        });
      schedule(() => this.connect(), wait);
    };
  }

  close(): void {
    this.closed = true;
    this.source?.close();
    this.source = null;
    this.options.onStatus?.("closed");
  }
}
