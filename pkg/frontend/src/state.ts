/** DOM-free gallery state machine.
 *
 * Holds the current page of tile cards, the selection cursor, and the
 * progress counters. Label and undo actions go through a single-slot
 * request queue: at most one request is in flight, later keypresses are
 * applied in order. A card is updated optimistically and reverted if the
 * server rejects the request, so the rendered state never disagrees with
 * the server once the queue drains.
 */

import { ApiClient, Label, StatusFilter, TileRow, Progress } from "./api.js";

export interface Card {
  slide: string;
  x: number;
  y: number;
  tissueFraction: number;
  label: Label | null;
  imageUrl: string;
}

export interface GallerySnapshot {
  cards: Card[];
  cursor: number;
  page: number;
  totalPages: number;
  totalTiles: number;
  statusFilter: StatusFilter;
  slideFilter: string | null;
  progress: Progress;
  toast: string | null;
  offline: boolean;
}

export type Listener = (snap: GallerySnapshot) => void;

function cardFromRow(row: TileRow): Card {
  return {
    slide: row.slide,
    x: row.x,
    y: row.y,
    tissueFraction: row.tissue_fraction,
    label: row.label,
    imageUrl: row.image_url,
  };
}

export class GalleryState {
  cards: Card[] = [];
  cursor = 0;
  page = 0;
  pageSize = 50;
  totalTiles = 0;
  statusFilter: StatusFilter = "all";
  slideFilter: string | null = null;
  progress: Progress = { labeled: 0, total: 0 };
  toast: string | null = null;
  offline = false;
  annotator = "anonymous";

  private queue: (() => Promise<void>)[] = [];
  private draining = false;
  private listeners: Listener[] = [];
  /** Last labels acknowledged per annotator action, used to revert undo optimism. */
  private history: { slide: string; x: number; y: number; previous: Label | null }[] = [];

  constructor(private api: ApiClient) {}

  subscribe(fn: Listener): void {
    this.listeners.push(fn);
  }

  snapshot(): GallerySnapshot {
    return {
      cards: this.cards.map((c) => ({ ...c })),
      cursor: this.cursor,
      page: this.page,
      totalPages: Math.max(1, Math.ceil(this.totalTiles / this.pageSize)),
      totalTiles: this.totalTiles,
      statusFilter: this.statusFilter,
      slideFilter: this.slideFilter,
      progress: { ...this.progress },
      toast: this.toast,
      offline: this.offline,
    };
  }

  private emit(): void {
    const snap = this.snapshot();
    for (const fn of this.listeners) fn(snap);
  }

  /** Number of queued + in-flight requests; 0 means state is server-settled. */
  pending(): number {
    return this.queue.length + (this.draining ? 1 : 0);
  }

  async refresh(): Promise<void> {
    try {
      const [pageDoc, progress] = await Promise.all([
        this.api.getTiles({
          slide: this.slideFilter ?? undefined,
          status: this.statusFilter,
          page: this.page,
        }),
        this.api.getProgress(),
      ]);
      this.cards = pageDoc.tiles.map(cardFromRow);
      this.pageSize = pageDoc.page_size;
      this.totalTiles = pageDoc.total;
      this.progress = progress;
      this.cursor = this.cards.length > 0 ? Math.min(this.cursor, this.cards.length - 1) : 0;
      this.offline = false;
    } catch (err) {
      this.offline = true;
      this.toast = err instanceof Error ? err.message : "service unreachable";
    }
    this.emit();
  }

  async setFilters(status: StatusFilter, slide: string | null): Promise<void> {
    this.statusFilter = status;
    this.slideFilter = slide;
    this.page = 0;
    this.cursor = 0;
    await this.refresh();
  }

  async setPage(page: number): Promise<void> {
    const last = Math.max(0, Math.ceil(this.totalTiles / this.pageSize) - 1);
    this.page = Math.min(Math.max(0, page), last);
    this.cursor = 0;
    await this.refresh();
  }

  moveCursor(delta: number): void {
    if (this.cards.length === 0) return;
    this.cursor = Math.min(Math.max(0, this.cursor + delta), this.cards.length - 1);
    this.emit();
  }

  /** Map a keypress to an action. Returns false for unhandled keys. */
  handleKey(key: string): boolean {
    switch (key) {
      case "t":
        this.labelFocused("tumor");
        return true;
      case "n":
        this.labelFocused("non_tumor");
        return true;
      case "u":
        this.undo();
        return true;
      case "ArrowRight":
        this.moveCursor(1);
        return true;
      case "ArrowLeft":
        this.moveCursor(-1);
        return true;
      case "ArrowDown":
        this.moveCursor(5);
        return true;
      case "ArrowUp":
        this.moveCursor(-5);
        return true;
      default:
        return false;
    }
  }

  labelFocused(label: Label): void {
    const card = this.cards[this.cursor];
    if (!card) return;
    const previous = card.label;
    // optimistic update + cursor advance; reverted if the POST fails
    card.label = label;
    const entry = { slide: card.slide, x: card.x, y: card.y, previous };
    this.history.push(entry);
    if (this.cursor < this.cards.length - 1) this.cursor += 1;
    this.emit();
    this.enqueue(async () => {
      try {
        await this.api.postLabel(card.slide, card.x, card.y, label, this.annotator);
        this.progress = await this.api.getProgress();
      } catch (err) {
        card.label = previous;
        const i = this.history.indexOf(entry);
        if (i >= 0) this.history.splice(i, 1);
        this.toast = err instanceof Error ? err.message : "label failed";
      }
      this.emit();
    });
  }

  undo(): void {
    const entry = this.history.pop();
    const card = entry
      ? this.cards.find((c) => c.slide === entry.slide && c.x === entry.x && c.y === entry.y)
      : undefined;
    const shown = card ? card.label : null;
    if (card && entry) card.label = entry.previous;
    this.emit();
    this.enqueue(async () => {
      try {
        await this.api.postUndo(this.annotator);
        this.progress = await this.api.getProgress();
      } catch (err) {
        if (card && entry) {
          card.label = shown;
          this.history.push(entry);
        }
        this.toast = err instanceof Error ? err.message : "undo failed";
      }
      this.emit();
    });
  }

  clearToast(): void {
    this.toast = null;
    this.emit();
  }

  private enqueue(job: () => Promise<void>): void {
    this.queue.push(job);
    if (!this.draining) void this.drain();
  }

  private async drain(): Promise<void> {
    this.draining = true;
    while (this.queue.length > 0) {
      const job = this.queue.shift()!;
      await job();
    }
    this.draining = false;
  }

  /** Resolves once every queued request has settled. */
  async settled(): Promise<void> {
    while (this.pending() > 0) {
      await new Promise((resolve) => setTimeout(resolve, 0));
    }
  }
}
