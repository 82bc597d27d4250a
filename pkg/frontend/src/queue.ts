import type { Judgment } from "./types.js";

const STORAGE_KEY = "phenoaudit_unsent_judgments";

/**
 * Offline buffer for judgments that could not reach the server.
 *
 * Strictly ordered: flush sends oldest-first and stops at the first failure
 * so a judgment is never skipped or reordered. Only judgments are persisted,
 * never packet content.
 */
export class UnsentQueue {
  constructor(private storage: Storage) {}

  private load(): Judgment[] {
    try {
      return JSON.parse(this.storage.getItem(STORAGE_KEY) ?? "[]");
    } catch {
      return [];
    }
  }

  private save(items: Judgment[]): void {
    this.storage.setItem(STORAGE_KEY, JSON.stringify(items));
  }

  get size(): number {
    return this.load().length;
  }

  push(judgment: Judgment): void {
    const items = this.load();
    items.push(judgment);
    this.save(items);
  }

  /** Send queued judgments in order; returns how many were delivered. */
  async flush(send: (j: Judgment) => Promise<unknown>): Promise<number> {
    const items = this.load();
    let delivered = 0;
    while (items.length > 0) {
      try {
        await send(items[0]!);
      } catch {
        break;
      }
      items.shift();
      delivered += 1;
      this.save(items);
    }
    return delivered;
  }

  clear(): void {
    this.save([]);
  }
}
