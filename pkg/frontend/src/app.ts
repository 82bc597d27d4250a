import { ConflictError, NetworkError, ReviewApi } from "./api.js";
import { attachKeyboard } from "./keyboard.js";
import { UnsentQueue } from "./queue.js";
import {
  clearBanner,
  renderBanner,
  renderDone,
  renderPacket,
  type VerdictFormHandle,
} from "./render.js";
import { isDone, type Judgment, type NextCase } from "./types.js";

export interface AppOptions {
  root: HTMLElement;
  api: ReviewApi;
  doc: Document;
  storage: Storage;
  win?: { addEventListener(type: string, cb: () => void): void };
}

/**
 * One-packet-at-a-time session controller.
 *
 * Exactly one packet is on screen; judged packets never resurface. Submits
 * that fail with a network error are queued locally (visible "unsent" badge)
 * and flushed in order on the next successful contact.
 */
export class ConsoleApp {
  readonly queue: UnsentQueue;
  private form: VerdictFormHandle | null = null;
  private current: NextCase | null = null;
  private submitting = false;
  private detachKeys: (() => void) | null = null;
  judgedCount = 0;

  constructor(private opts: AppOptions) {
    this.queue = new UnsentQueue(opts.storage);
    this.detachKeys = attachKeyboard(opts.doc, {
      verdict: (v) => this.form?.setVerdict(v),
      confidence: (c) => this.form?.setConfidence(c),
      submit: () => void this.submit(),
    });
    opts.win?.addEventListener("online", () => void this.retry());
  }

  async start(): Promise<void> {
    await this.loadNext();
  }

  stop(): void {
    this.detachKeys?.();
    this.detachKeys = null;
  }

  private async flushQueue(): Promise<void> {
    if (this.queue.size > 0) {
      await this.queue.flush((j: Judgment) => this.opts.api.submit(j));
    }
  }

  async loadNext(): Promise<void> {
    try {
      await this.flushQueue();
      const next = await this.opts.api.next();
      clearBanner(this.opts.root);
      if (isDone(next)) {
        this.current = null;
        this.form = null;
        renderDone(this.opts.doc, this.opts.root, next.total);
        return;
      }
      this.current = next;
      this.form = renderPacket(
        this.opts.doc,
        this.opts.root,
        next,
        this.queue.size,
        () => void this.submit(),
      );
    } catch (err) {
      if (err instanceof NetworkError) {
        const kept = this.queue.size > 0
          ? ` ${this.queue.size} unsent judgment(s) kept locally.`
          : " Nothing was discarded.";
        renderBanner(this.opts.doc, this.opts.root,
          `Connection lost.${kept} Retrying on reconnect.`);
        return;
      }
      throw err;
    }
  }

  /** Manual retry hook (also bound to the window's online event). */
  async retry(): Promise<void> {
    if (this.current === null) {
      await this.loadNext();
    } else {
      await this.flushQueue();
      clearBanner(this.opts.root);
    }
  }

  async submit(): Promise<void> {
    if (this.submitting || !this.form || !this.current) return;
    if (!this.form.canSubmit()) return;
    this.submitting = true;  // double-click guard: one submission per packet
    const judgment: Judgment = {
      token: this.current.packet.token,
      verdict: this.form.verdict!,
      confidence: this.form.confidence!,
    };
    try {
      await this.opts.api.submit(judgment);
      this.judgedCount += 1;
    } catch (err) {
      if (err instanceof NetworkError) {
        this.queue.push(judgment);
        this.judgedCount += 1;
        renderBanner(this.opts.doc, this.opts.root,
          `Offline - judgment queued (${this.queue.size} unsent).`);
      } else if (err instanceof ConflictError) {
        renderBanner(this.opts.doc, this.opts.root,
          "This case was already judged differently; moving on.");
      } else {
        this.submitting = false;
        throw err;
      }
    }
    this.current = null;
    this.form = null;
    this.submitting = false;
    await this.loadNext();
  }
}
