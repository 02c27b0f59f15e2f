/** Event-stream subscription and the log ring buffer.
 *
 * The daemon pushes `data: {...}` lines over a long-lived response. The
 * reader is fetch-based so it runs in browsers and in node tests alike,
 * and reconnects with exponential backoff when the connection drops.
 */

import type { GridEvent } from "./types.js";

export class RingBuffer<T> {
  private items: T[] = [];

  constructor(readonly capacity: number) {}

  push(item: T) {
    this.items.push(item);
    if (this.items.length > this.capacity) {
      this.items.splice(0, this.items.length - this.capacity);
    }
  }

  toArray(): T[] {
    return this.items.slice();
  }

  get length(): number {
    return this.items.length;
  }
}

export type StreamState = "connecting" | "live" | "reconnecting" | "stopped";

export interface StreamCallbacks {
  onEvent: (event: GridEvent) => void;
  onState?: (state: StreamState) => void;
}

export class EventStream {
  private stopped = false;
  private backoffMs = 200;
  state: StreamState = "connecting";

  constructor(readonly base: string, private callbacks: StreamCallbacks,
              private fetchFn: typeof fetch = fetch) {}

  start(): void {
    void this.run();
  }

  stop(): void {
    this.stopped = true;
    this.setState("stopped");
  }

  private setState(state: StreamState) {
    this.state = state;
    this.callbacks.onState?.(state);
  }

  private async run(): Promise<void> {
    while (!this.stopped) {
      try {
        this.setState(this.state === "connecting" ? "connecting" : "reconnecting");
        const response = await this.fetchFn(this.base + "/v1/events");
        if (!response.ok || !response.body) throw new Error(`stream got ${response.status}`);
        this.setState("live");
        this.backoffMs = 200;
        await this.consume(response.body);
      } catch {
        // fall through to reconnect
      }
      if (this.stopped) return;
      this.setState("reconnecting");
      await sleep(this.backoffMs);
      this.backoffMs = Math.min(this.backoffMs * 2, 5000);
    }
  }

  private async consume(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (this.stopped) {
        await reader.cancel().catch(() => undefined);
        return;
      }
      if (done) return;
      buffer += decoder.decode(value, { stream: true });
      let index;
      while ((index = buffer.indexOf("\n")) >= 0) {
        const line = buffer.slice(0, index).trim();
        buffer = buffer.slice(index + 1);
        if (!line.startsWith("data: ")) continue;
        try {
          this.callbacks.onEvent(JSON.parse(line.slice(6)) as GridEvent);
        } catch {
          // a malformed event record never kills the stream
        }
      }
    }
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
