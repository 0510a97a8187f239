/** UI state, kept strictly reconstructable from the server.
 *
 * SessionPaneModel mirrors one server-side session: append-only scrollback
 * plus a cursor that always equals the last next_offset received, so a
 * reload can rebuild the identical pane from GET /sessions and an output
 * re-read from offset 0.
 */

import { SessionView, StatsView } from './api.js';

const decoder = new TextDecoder('utf-8', { fatal: false });

export type AppendResult = 'appended' | 'stale' | 'gap';

export class SessionPaneModel {
  sessionId: number;
  payloadSpec: string;
  state: 'opening' | 'active' | 'closed' = 'opening';
  scrollback = '';
  pendingInput = '';
  cursor = 0;
  truncatedBefore = 0;
  lastError: string | null = null;
  inlineError: string | null = null;

  constructor(sessionId: number, payloadSpec: string) {
    this.sessionId = sessionId;
    this.payloadSpec = payloadSpec;
  }

  applyView(view: SessionView): void {
    this.payloadSpec = view.payload_spec;
    this.state = view.state;
    this.truncatedBefore = view.truncated_before;
    this.lastError = view.last_error;
  }

  /** Append an output chunk ending at nextOffset.
   *
   * Chunks already covered by the cursor are ignored ('stale'); a chunk
   * starting past the cursor cannot be applied without losing bytes and
   * reports 'gap' so the caller re-reads from the cursor.  Overlapping
   * chunks are trimmed, keeping scrollback append-only.
   */
  appendChunk(data: Uint8Array, nextOffset: number): AppendResult {
    if (nextOffset <= this.cursor) return 'stale';
    const start = nextOffset - data.length;
    if (start > this.cursor) return 'gap';
    const fresh = data.subarray(this.cursor - start);
    this.scrollback += decoder.decode(fresh);
    this.cursor = nextOffset;
    return 'appended';
  }

  get truncated(): boolean {
    return this.truncatedBefore > 0;
  }
}

export interface TelemetryPoint {
  t: number; // epoch milliseconds
  stats: StatsView;
}

/** Rolling, time-ordered window of channel statistics snapshots. */
export class TelemetryModel {
  readonly points: TelemetryPoint[] = [];

  constructor(readonly windowMs: number = 5 * 60 * 1000) {}

  append(stats: StatsView, t: number = Date.now()): void {
    const last = this.points[this.points.length - 1];
    if (last && t < last.t) return; // keep the series time-ordered
    this.points.push({ t, stats });
    const cutoff = t - this.windowMs;
    while (this.points.length && this.points[0].t < cutoff) {
      this.points.shift();
    }
  }

  get latest(): StatsView | null {
    return this.points.length
      ? this.points[this.points.length - 1].stats
      : null;
  }

  /** Observed polls per second over the retained window. */
  get pollRate(): number | null {
    if (this.points.length < 2) return null;
    const first = this.points[0];
    const last = this.points[this.points.length - 1];
    const dt = (last.t - first.t) / 1000;
    if (dt <= 0) return null;
    return (last.stats.polls_observed - first.stats.polls_observed) / dt;
  }
}
