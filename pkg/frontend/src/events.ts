/** Server-sent event subscription with automatic retry and backoff.
 *
 * The server emits named events (session / output / stats / file) with JSON
 * payloads.  On error the stream is closed and reconnected with exponential
 * backoff; the connection state is surfaced so the UI can show a
 * disconnected banner.
 */

export type ConnectionState = 'connecting' | 'live' | 'disconnected';

export type EventHandler = (name: string, payload: any) => void;
export type StateHandler = (state: ConnectionState, retryInMs?: number) => void;

export const EVENT_NAMES = ['session', 'output', 'stats', 'file'] as const;

interface EventSourceLike {
  addEventListener(name: string, cb: (ev: MessageEvent) => void): void;
  close(): void;
  onopen: ((ev: any) => void) | null;
  onerror: ((ev: any) => void) | null;
}

export type EventSourceFactory = (url: string) => EventSourceLike;

const INITIAL_BACKOFF_MS = 1000;
const MAX_BACKOFF_MS = 15000;

export class EventStream {
  state: ConnectionState = 'connecting';
  private source: EventSourceLike | null = null;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  private backoffMs = INITIAL_BACKOFF_MS;
  private stopped = false;

  constructor(
    private readonly url: string,
    private readonly onEvent: EventHandler,
    private readonly onState: StateHandler,
    private readonly factory: EventSourceFactory =
      (u) => new EventSource(u) as unknown as EventSourceLike,
  ) {}

  start(): void {
    this.stopped = false;
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    if (this.retryTimer !== null) clearTimeout(this.retryTimer);
    this.retryTimer = null;
    this.source?.close();
    this.source = null;
  }

  private setState(state: ConnectionState, retryInMs?: number): void {
    this.state = state;
    this.onState(state, retryInMs);
  }

  private connect(): void {
    this.setState('connecting');
    const source = this.factory(this.url);
    this.source = source;
    source.onopen = () => {
      this.backoffMs = INITIAL_BACKOFF_MS;
      this.setState('live');
    };
    source.onerror = () => this.scheduleRetry();
    for (const name of EVENT_NAMES) {
      source.addEventListener(name, (ev) => {
        try {
          this.onEvent(name, JSON.parse(ev.data));
        } catch {
          /* malformed frame; skip */
        }
      });
    }
  }

  private scheduleRetry(): void {
    this.source?.close();
    this.source = null;
    if (this.stopped || this.retryTimer !== null) return;
    const wait = this.backoffMs;
    this.backoffMs = Math.min(this.backoffMs * 2, MAX_BACKOFF_MS);
    this.setState('disconnected', wait);
    this.retryTimer = setTimeout(() => {
      this.retryTimer = null;
      if (!this.stopped) this.connect();
    }, wait);
  }
}
