/** DOM rendering for the analyst console.
 *
 * One rendering context: the whole view re-renders from ConsoleStore state
 * on every change notification.  Scrollback panes and input boxes are keyed
 * by session id and reused across renders so focus and scroll position
 * survive updates.
 */

import { ConsoleStore } from './store.js';
import { SessionPaneModel } from './models.js';

export class ConsoleApp {
  private paneNodes = new Map<number, HTMLElement>();
  private root: HTMLElement;

  constructor(root: HTMLElement, readonly store: ConsoleStore) {
    this.root = root;
    root.innerHTML = `
      <div class="banner" data-role="banner" hidden></div>
      <header>
        <h1>covert channel console</h1>
        <form data-role="open-form">
          <input data-role="payload-spec" placeholder="payload, e.g. shell"
                 value="shell">
          <button type="submit">open session</button>
        </form>
        <form data-role="push-form">
          <input data-role="push-file" type="file">
          <button type="submit">push file</button>
          <span data-role="push-status"></span>
        </form>
      </header>
      <div class="telemetry" data-role="telemetry"></div>
      <main data-role="panes"></main>
    `;
    this.bindHeader();
    store.onChange(() => this.render());
    this.render();
  }

  private q<T extends HTMLElement>(selector: string): T {
    return this.root.querySelector(selector) as T;
  }

  private bindHeader(): void {
    this.q<HTMLFormElement>('[data-role=open-form]').addEventListener(
      'submit', (ev) => {
        ev.preventDefault();
        const spec = this.q<HTMLInputElement>('[data-role=payload-spec]');
        void this.store.openSession(spec.value.trim() || 'shell');
      });
    this.q<HTMLFormElement>('[data-role=push-form]').addEventListener(
      'submit', (ev) => {
        ev.preventDefault();
        void this.pushSelectedFile();
      });
  }

  private async pushSelectedFile(): Promise<void> {
    const input = this.q<HTMLInputElement>('[data-role=push-file]');
    const status = this.q<HTMLElement>('[data-role=push-status]');
    const file = input.files && input.files[0];
    if (!file) {
      status.textContent = 'choose a file first';
      return;
    }
    try {
      const bytes = new Uint8Array(await file.arrayBuffer());
      const report = await this.store.api.pushFile(file.name, bytes);
      status.textContent =
        `transfer ${report.transfer_id}: ${report.chunks} chunks queued`;
    } catch (e) {
      status.textContent = String(e instanceof Error ? e.message : e);
    }
  }

  render(): void {
    this.renderBanner();
    this.renderTelemetry();
    this.renderPanes();
  }

  private renderBanner(): void {
    const banner = this.q<HTMLElement>('[data-role=banner]');
    const { connection, retryInMs, globalError } = this.store;
    if (connection === 'live' && !globalError) {
      banner.hidden = true;
      return;
    }
    banner.hidden = false;
    if (globalError) {
      banner.textContent = `API error: ${globalError}`;
    } else if (connection === 'disconnected') {
      const wait = retryInMs ? ` — retrying in ${retryInMs / 1000}s` : '';
      banner.textContent = `disconnected from event stream${wait}`;
    } else {
      banner.textContent = 'connecting…';
    }
  }

  private renderTelemetry(): void {
    const strip = this.q<HTMLElement>('[data-role=telemetry]');
    const stats = this.store.telemetry.latest;
    if (!stats) {
      strip.textContent = 'no telemetry yet';
      return;
    }
    const rate = this.store.telemetry.pollRate;
    strip.innerHTML = '';
    const cells: Array<[string, string]> = [
      ['poll cadence', rate === null ? '—' : `${rate.toFixed(2)}/s`],
      ['polls', String(stats.polls_observed)],
      ['pending signals', String(stats.pending_signals_sent)],
      ['queue depth', String(stats.queue_depth)],
      ['covert r/w', `${stats.covert_reads}/${stats.covert_writes}`],
      ['last delay', `${stats.last_delay_applied_ms} ms`],
    ];
    for (const [label, value] of cells) {
      const cell = document.createElement('span');
      cell.className = 'stat';
      cell.innerHTML =
        `<span class="label">${label}</span> <span class="value"></span>`;
      (cell.querySelector('.value') as HTMLElement).textContent = value;
      strip.appendChild(cell);
    }
  }

  private renderPanes(): void {
    const container = this.q<HTMLElement>('[data-role=panes]');
    const live = new Set(this.store.panes.keys());
    for (const [id, node] of this.paneNodes) {
      if (!live.has(id)) {
        node.remove();
        this.paneNodes.delete(id);
      }
    }
    for (const pane of this.store.panes.values()) {
      let node = this.paneNodes.get(pane.sessionId);
      if (!node) {
        node = this.buildPane(pane);
        this.paneNodes.set(pane.sessionId, node);
        container.appendChild(node);
      }
      this.updatePane(node, pane);
    }
  }

  private buildPane(pane: SessionPaneModel): HTMLElement {
    const node = document.createElement('section');
    node.className = 'pane';
    node.dataset.sessionId = String(pane.sessionId);
    node.innerHTML = `
      <div class="pane-head">
        <span data-role="title"></span>
        <span data-role="state" class="badge"></span>
        <button data-role="close">close</button>
      </div>
      <div data-role="truncated" class="note" hidden></div>
      <pre data-role="scrollback"></pre>
      <div data-role="error" class="error" hidden></div>
      <form data-role="input-form">
        <input data-role="input" autocomplete="off"
               placeholder="command line">
        <button type="submit">send</button>
      </form>
    `;
    const form = node.querySelector('[data-role=input-form]') as HTMLFormElement;
    const input = node.querySelector('[data-role=input]') as HTMLInputElement;
    input.addEventListener('input', () => {
      pane.pendingInput = input.value;
    });
    form.addEventListener('submit', (ev) => {
      ev.preventDefault();
      const line = input.value;
      pane.pendingInput = line;
      void this.store.submitCommand(pane.sessionId, line);
    });
    (node.querySelector('[data-role=close]') as HTMLElement).addEventListener(
      'click', () => void this.store.closeSession(pane.sessionId));
    return node;
  }

  private updatePane(node: HTMLElement, pane: SessionPaneModel): void {
    (node.querySelector('[data-role=title]') as HTMLElement).textContent =
      `#${pane.sessionId} ${pane.payloadSpec}`;
    const badge = node.querySelector('[data-role=state]') as HTMLElement;
    badge.textContent = pane.state;
    badge.className = `badge badge-${pane.state}`;
    const scrollback =
      node.querySelector('[data-role=scrollback]') as HTMLElement;
    if (scrollback.textContent !== pane.scrollback) {
      scrollback.textContent = pane.scrollback;
      scrollback.scrollTop = scrollback.scrollHeight;
    }
    const truncated =
      node.querySelector('[data-role=truncated]') as HTMLElement;
    truncated.hidden = !pane.truncated;
    if (pane.truncated) {
      truncated.textContent =
        `older output truncated (first ${pane.truncatedBefore} bytes dropped)`;
    }
    const error = node.querySelector('[data-role=error]') as HTMLElement;
    const message = pane.inlineError ?? pane.lastError;
    error.hidden = !message;
    error.textContent = message ?? '';
    const input = node.querySelector('[data-role=input]') as HTMLInputElement;
    if (input.value !== pane.pendingInput) input.value = pane.pendingInput;
    input.disabled = pane.state === 'closed';
  }
}
