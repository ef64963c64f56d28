/*
 * Annotator prompt state: a draft prompt list the user edits, the last list
 * the service acknowledged, and the overlays that belong to it.
 *
 * Two rules the UI must never break:
 *  - overlays always correspond to the acknowledged list, so masks and
 *    markers repaint together only when a response lands;
 *  - at most one update request is in flight per session. Edits made while
 *    a request is pending coalesce into the draft and are sent as one
 *    follow-up when the response arrives.
 */

import type { RleMask } from "./rle.js";

export type Polarity = 1 | -1;

export interface Prompt {
  view: number;
  row: number;
  col: number;
  polarity: Polarity;
}

export type SendFn = (prompts: Prompt[]) => Promise<RleMask[]>;

export interface StoreEvents {
  onChange: () => void;
  onNotice: (message: string) => void;
  onError: (message: string, status?: number) => void;
}

function samePrompts(a: Prompt[], b: Prompt[]): boolean {
  return (
    a.length === b.length &&
    a.every(
      (p, i) =>
        p.view === b[i].view &&
        p.row === b[i].row &&
        p.col === b[i].col &&
        p.polarity === b[i].polarity,
    )
  );
}

export class PromptStore {
  private draft: Prompt[] = [];
  private acknowledged: Prompt[] = [];
  private masks: RleMask[] = [];
  private undoStack: Prompt[][] = [];
  private redoStack: Prompt[][] = [];
  private inFlight = false;
  private dirty = false;

  constructor(
    private send: SendFn,
    private events: StoreEvents,
  ) {}

  get prompts(): Prompt[] {
    return this.acknowledged;
  }

  get draftPrompts(): Prompt[] {
    return this.draft;
  }

  get overlays(): RleMask[] {
    return this.masks;
  }

  get busy(): boolean {
    return this.inFlight;
  }

  /** Index of a prompt in the given view within `tol` image pixels, or -1. */
  hitTest(view: number, row: number, col: number, tol: number): number {
    for (let i = this.draft.length - 1; i >= 0; i--) {
      const p = this.draft[i];
      if (p.view === view && Math.abs(p.row - row) <= tol && Math.abs(p.col - col) <= tol) {
        return i;
      }
    }
    return -1;
  }

  addPrompt(p: Prompt): void {
    this.edit([...this.draft, p]);
  }

  removePrompt(index: number): void {
    if (index < 0 || index >= this.draft.length) {
      return;
    }
    if (this.draft.length === 1) {
      // Mirrors the service precondition instead of bouncing off a 422.
      this.events.onNotice("at least one prompt required");
      return;
    }
    this.edit(this.draft.filter((_, i) => i !== index));
  }

  clear(): void {
    this.draft = [];
    this.acknowledged = [];
    this.masks = [];
    this.undoStack = [];
    this.redoStack = [];
    this.dirty = false;
    this.events.onChange();
  }

  undo(): void {
    const prev = this.undoStack.pop();
    if (prev === undefined) {
      return;
    }
    this.redoStack.push(this.draft);
    this.draft = prev;
    this.events.onChange();
    this.flush();
  }

  redo(): void {
    const next = this.redoStack.pop();
    if (next === undefined) {
      return;
    }
    this.undoStack.push(this.draft);
    this.draft = next;
    this.events.onChange();
    this.flush();
  }

  private edit(next: Prompt[]): void {
    this.undoStack.push(this.draft);
    this.redoStack = [];
    this.draft = next;
    this.events.onChange();
    this.flush();
  }

  flush(): void {
    if (this.inFlight) {
      this.dirty = true;
      return;
    }
    if (this.draft.length === 0) {
      return;
    }
    if (samePrompts(this.draft, this.acknowledged)) {
      return;
    }
    const sent = this.draft;
    this.inFlight = true;
    this.dirty = false;
    this.send(sent).then(
      (masks) => {
        this.inFlight = false;
        this.acknowledged = sent;
        this.masks = masks;
        this.events.onChange();
        if (this.dirty) {
          this.flush();
        }
      },
      (err: unknown) => {
        this.inFlight = false;
        const status = (err as { status?: number }).status;
        this.events.onError(err instanceof Error ? err.message : String(err), status);
        if (this.dirty) {
          this.flush();
        }
      },
    );
  }
}
