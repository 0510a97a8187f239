declare module 'eventsource' {
  class EventSource {
    constructor(url: string, init?: { headers?: Record<string, string> });
    onopen: ((ev: MessageEvent) => void) | null;
    onmessage: ((ev: MessageEvent) => void) | null;
    onerror: ((ev: MessageEvent) => void) | null;
    addEventListener(name: string, cb: (ev: MessageEvent) => void): void;
    close(): void;
  }
  export default EventSource;
}
