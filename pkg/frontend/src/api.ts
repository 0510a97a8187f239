/** Typed client for the analyst-console HTTP/JSON API.
 *
 * The UI talks to the server exclusively through this module; there is no
 * other channel to the emulator.  Session output is binary and travels
 * base64-encoded in JSON with cumulative byte offsets.
 */

export interface SessionView {
  session_id: number;
  payload_spec: string;
  state: 'opening' | 'active' | 'closed';
  bytes_in: number;
  bytes_out: number;
  next_offset: number;
  truncated_before: number;
  last_error: string | null;
}

export interface StatsView {
  polls_observed: number;
  pending_signals_sent: number;
  covert_reads: number;
  covert_writes: number;
  normal_frames: number;
  queue_depth: number;
  last_delay_applied_ms: number;
}

export interface TransferReport {
  transfer_id: number;
  name: string;
  size: number;
  chunks: number;
  crc32: number;
  complete: boolean;
  error: string | null;
}

export interface OutputChunk {
  data: Uint8Array;
  nextOffset: number;
}

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
    this.name = 'ApiError';
  }
}

export function decodeBase64(b64: string): Uint8Array {
  const binary = atob(b64);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}

async function parseJson(resp: Response): Promise<any> {
  if (!resp.ok) {
    let detail = `${resp.status}`;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === 'string') detail = body.detail;
    } catch {
      /* non-JSON error body; keep the status text */
    }
    throw new ApiError(resp.status, detail);
  }
  return resp.json();
}

export class ApiClient {
  constructor(readonly base: string = '') {}

  private url(path: string): string {
    return this.base + path;
  }

  async listSessions(): Promise<SessionView[]> {
    const body = await parseJson(await fetch(this.url('/sessions')));
    return body.sessions as SessionView[];
  }

  async openSession(payloadSpec: string): Promise<number> {
    const body = await parseJson(await fetch(this.url('/sessions'), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ payload_spec: payloadSpec }),
    }));
    return body.session_id as number;
  }

  async getSession(sessionId: number): Promise<SessionView> {
    return parseJson(await fetch(this.url(`/sessions/${sessionId}`)));
  }

  async sendInput(sessionId: number, line: string): Promise<void> {
    await parseJson(await fetch(this.url(`/sessions/${sessionId}/input`), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ line }),
    }));
  }

  async readOutput(sessionId: number, since = 0): Promise<OutputChunk> {
    const body = await parseJson(await fetch(
      this.url(`/sessions/${sessionId}/output?since=${since}`)));
    return { data: decodeBase64(body.data), nextOffset: body.next_offset };
  }

  async closeSession(sessionId: number): Promise<void> {
    await parseJson(await fetch(this.url(`/sessions/${sessionId}`), {
      method: 'DELETE',
    }));
  }

  async pushFile(name: string, content: Uint8Array): Promise<TransferReport> {
    return parseJson(await fetch(
      this.url(`/files?name=${encodeURIComponent(name)}`), {
        method: 'POST',
        headers: { 'Content-Type': 'application/octet-stream' },
        body: content as unknown as BodyInit,
      }));
  }

  async transferStatus(transferId: number): Promise<TransferReport> {
    return parseJson(await fetch(this.url(`/files/${transferId}`)));
  }

  async stats(): Promise<StatsView> {
    return parseJson(await fetch(this.url('/stats')));
  }
}
