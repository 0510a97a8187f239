/** Central UI state: session panes, telemetry, connection status.
 *
 * The server is the source of truth.  refresh() rebuilds every pane purely
 * from GET /sessions plus an output re-read from offset 0, which is exactly
 * what a page reload does; live events only advance the same state.
 */

import {
  ApiClient, ApiError, SessionView, StatsView, decodeBase64,
} from './api.js';
import { EventSourceFactory, EventStream, ConnectionState } from './events.js';
import { SessionPaneModel, TelemetryModel } from './models.js';

export type Listener = () => void;

export class ConsoleStore {
  readonly panes = new Map<number, SessionPaneModel>();
  readonly telemetry = new TelemetryModel();
  connection: ConnectionState = 'connecting';
  retryInMs: number | undefined;
  globalError: string | null = null;

  private stream: EventStream | null = null;
  private stopped = false;
  private listeners: Listener[] = [];
  /** Per-session promise chains keeping input POSTs strictly ordered. */
  private submitChains = new Map<number, Promise<void>>();

  constructor(
    readonly api: ApiClient,
    private readonly eventSourceFactory?: EventSourceFactory,
  ) {}

  onChange(listener: Listener): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    if (this.stopped) return;
    for (const listener of this.listeners) listener();
  }

  // --- lifecycle ---

  start(): void {
    this.stream = new EventStream(
      this.api.base + '/events',
      (name, payload) => this.handleEvent(name, payload),
      (state, retryInMs) => {
        this.connection = state;
        this.retryInMs = retryInMs;
        if (state === 'live') {
          // catch up on anything missed while disconnected
          void this.refresh();
        }
        this.notify();
      },
      this.eventSourceFactory,
    );
    this.stream.start();
    void this.refresh();
  }

  stop(): void {
    this.stopped = true;
    this.stream?.stop();
  }

  /** Rebuild all panes from the API alone (initial load / reconnect). */
  async refresh(): Promise<void> {
    if (this.stopped) return;
    let views: SessionView[];
    try {
      views = await this.api.listSessions();
      this.globalError = null;
    } catch (e) {
      this.globalError = String(e instanceof Error ? e.message : e);
      this.notify();
      return;
    }
    const seen = new Set<number>();
    for (const view of views) {
      seen.add(view.session_id);
      const pane = this.paneFor(view.session_id, view.payload_spec);
      pane.applyView(view);
      await this.catchUp(pane);
    }
    for (const id of [...this.panes.keys()]) {
      if (!seen.has(id)) this.panes.delete(id);
    }
    this.notify();
  }

  private paneFor(sessionId: number, payloadSpec: string): SessionPaneModel {
    let pane = this.panes.get(sessionId);
    if (!pane) {
      pane = new SessionPaneModel(sessionId, payloadSpec);
      this.panes.set(sessionId, pane);
    }
    return pane;
  }

  /** Read output from the pane's cursor until the server has no more. */
  private async catchUp(pane: SessionPaneModel): Promise<void> {
    try {
      const chunk = await this.api.readOutput(pane.sessionId, pane.cursor);
      if (pane.cursor === 0 && chunk.nextOffset > chunk.data.length) {
        // ring truncation: the earliest retained byte is not offset 0
        pane.cursor = chunk.nextOffset - chunk.data.length;
        pane.truncatedBefore = pane.cursor;
      }
      pane.appendChunk(chunk.data, chunk.nextOffset);
    } catch (e) {
      if (e instanceof ApiError && e.status === 404) {
        this.panes.delete(pane.sessionId);
      }
    }
  }

  // --- live events ---

  handleEvent(name: string, payload: any): void {
    if (name === 'session') {
      const view = payload as SessionView;
      const pane = this.paneFor(view.session_id, view.payload_spec);
      pane.applyView(view);
    } else if (name === 'output') {
      const pane = this.panes.get(payload.session_id);
      if (pane) {
        const bytes = decodeBase64(payload.data);
        if (pane.appendChunk(bytes, payload.next_offset) === 'gap') {
          void this.catchUp(pane).then(() => this.notify());
        }
      }
    } else if (name === 'stats') {
      this.telemetry.append(payload as StatsView);
    }
    this.notify();
  }

  // --- user actions (all go through the HTTP API) ---

  async openSession(payloadSpec: string): Promise<number> {
    const sessionId = await this.api.openSession(payloadSpec);
    this.paneFor(sessionId, payloadSpec);
    this.notify();
    return sessionId;
  }

  /**
   * Send one input line.  Submissions are serialized per session, the
   * pending input clears only once the server accepts, and failures
   * surface as inline pane errors without touching the scrollback.
   */
  submitCommand(sessionId: number, line: string): Promise<void> {
    const prev = this.submitChains.get(sessionId) ?? Promise.resolve();
    const next = prev.then(async () => {
      const pane = this.panes.get(sessionId);
      try {
        await this.api.sendInput(sessionId, line);
        if (pane) {
          pane.pendingInput = '';
          pane.inlineError = null;
        }
      } catch (e) {
        if (pane) {
          pane.inlineError = String(e instanceof Error ? e.message : e);
        }
      }
      this.notify();
    });
    this.submitChains.set(sessionId, next);
    return next;
  }

  async closeSession(sessionId: number): Promise<void> {
    const pane = this.panes.get(sessionId);
    try {
      await this.api.closeSession(sessionId);
    } catch (e) {
      if (pane) pane.inlineError = String(e instanceof Error ? e.message : e);
    }
    this.notify();
  }
}
