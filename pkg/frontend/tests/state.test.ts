import { describe, expect, it, vi } from "vitest";
import { PromptStore, type Prompt } from "../src/state.js";
import type { RleMask } from "../src/rle.js";

function maskFor(prompts: Prompt[]): RleMask[] {
  // Fake response tagged with the prompt count so tests can tell which
  // request produced which overlay.
  return [{ view: 0, h: 1, w: prompts.length, rle: [0, prompts.length] }];
}

function deferred<T>() {
  let resolve!: (v: T) => void;
  let reject!: (e: unknown) => void;
  const promise = new Promise<T>((res, rej) => {
    resolve = res;
    reject = rej;
  });
  return { promise, resolve, reject };
}

const P = (n: number): Prompt => ({ view: 0, row: n, col: n, polarity: 1 });

function makeStore(send: (p: Prompt[]) => Promise<RleMask[]>) {
  const events = {
    onChange: vi.fn(),
    onNotice: vi.fn(),
    onError: vi.fn(),
  };
  return { store: new PromptStore(send, events), events };
}

describe("prompt editing", () => {
  it("adds and acknowledges", async () => {
    const send = vi.fn(async (p: Prompt[]) => maskFor(p));
    const { store } = makeStore(send);
    store.addPrompt(P(1));
    await vi.waitFor(() => expect(store.prompts.length).toBe(1));
    expect(store.overlays[0].w).toBe(1);
    expect(send).toHaveBeenCalledTimes(1);
  });

  it("blocks removing the last prompt with a notice", async () => {
    const send = vi.fn(async (p: Prompt[]) => maskFor(p));
    const { store, events } = makeStore(send);
    store.addPrompt(P(1));
    await vi.waitFor(() => expect(store.prompts.length).toBe(1));
    store.removePrompt(0);
    expect(events.onNotice).toHaveBeenCalledWith("at least one prompt required");
    expect(store.draftPrompts.length).toBe(1);
    expect(send).toHaveBeenCalledTimes(1);
  });

  it("hitTest finds the nearest recent marker within tolerance", () => {
    const send = vi.fn(async (p: Prompt[]) => maskFor(p));
    const { store } = makeStore(send);
    store.addPrompt({ view: 0, row: 10, col: 10, polarity: 1 });
    store.addPrompt({ view: 1, row: 10, col: 10, polarity: -1 });
    expect(store.hitTest(0, 11, 9, 2)).toBe(0);
    expect(store.hitTest(0, 14, 10, 2)).toBe(-1);
    expect(store.hitTest(1, 10, 10, 0)).toBe(1);
  });
});

describe("request coalescing", () => {
  it("keeps a single request in flight and coalesces edits", async () => {
    const gates = [deferred<RleMask[]>(), deferred<RleMask[]>()];
    let call = 0;
    const sent: Prompt[][] = [];
    const send = vi.fn((p: Prompt[]) => {
      sent.push(p);
      return gates[call++].promise;
    });
    const { store } = makeStore(send);

    store.addPrompt(P(1)); // starts request 1
    store.addPrompt(P(2)); // while in flight
    store.addPrompt(P(3)); // also while in flight
    expect(send).toHaveBeenCalledTimes(1);
    expect(sent[0].length).toBe(1);

    gates[0].resolve(maskFor(sent[0]));
    await vi.waitFor(() => expect(send).toHaveBeenCalledTimes(2));
    // the two edits collapsed into one follow-up carrying all three prompts
    expect(sent[1].length).toBe(3);

    gates[1].resolve(maskFor(sent[1]));
    await vi.waitFor(() => expect(store.prompts.length).toBe(3));
    expect(store.overlays[0].w).toBe(3);
    expect(send).toHaveBeenCalledTimes(2);
  });

  it("overlays never show a stale in-flight result", async () => {
    const gate = deferred<RleMask[]>();
    let first = true;
    const send = vi.fn((p: Prompt[]) => {
      if (first) {
        first = false;
        return gate.promise;
      }
      return Promise.resolve(maskFor(p));
    });
    const { store } = makeStore(send);
    store.addPrompt(P(1));
    store.addPrompt(P(2));
    expect(store.overlays.length).toBe(0); // nothing acknowledged yet
    gate.resolve(maskFor([P(1)]));
    await vi.waitFor(() => expect(store.overlays.length).toBe(1));
    // after everything settles the overlay matches the final 2-prompt list
    await vi.waitFor(() => expect(store.overlays[0].w).toBe(2));
    expect(store.prompts.length).toBe(2);
  });

  it("identical draft does not resend", async () => {
    const send = vi.fn(async (p: Prompt[]) => maskFor(p));
    const { store } = makeStore(send);
    store.addPrompt(P(1));
    await vi.waitFor(() => expect(store.prompts.length).toBe(1));
    store.flush();
    store.flush();
    expect(send).toHaveBeenCalledTimes(1);
  });
});

describe("undo/redo", () => {
  it("walks the draft history and resyncs", async () => {
    const send = vi.fn(async (p: Prompt[]) => maskFor(p));
    const { store } = makeStore(send);
    store.addPrompt(P(1));
    await vi.waitFor(() => expect(store.prompts.length).toBe(1));
    store.addPrompt(P(2));
    await vi.waitFor(() => expect(store.prompts.length).toBe(2));

    store.undo();
    await vi.waitFor(() => expect(store.prompts.length).toBe(1));
    expect(store.draftPrompts.length).toBe(1);

    store.redo();
    await vi.waitFor(() => expect(store.prompts.length).toBe(2));
  });

  it("a new edit clears the redo branch", async () => {
    const send = vi.fn(async (p: Prompt[]) => maskFor(p));
    const { store } = makeStore(send);
    store.addPrompt(P(1));
    store.addPrompt(P(2));
    store.undo();
    store.addPrompt(P(9));
    store.redo(); // nothing to redo
    await vi.waitFor(() => expect(store.draftPrompts.length).toBe(2));
    expect(store.draftPrompts[1].row).toBe(9);
  });
});

describe("errors", () => {
  it("reports the server message and keeps the draft", async () => {
    const err = Object.assign(new Error("session gone"), { status: 404 });
    const send = vi.fn(() => Promise.reject(err));
    const { store, events } = makeStore(send);
    store.addPrompt(P(1));
    await vi.waitFor(() => expect(events.onError).toHaveBeenCalled());
    expect(events.onError).toHaveBeenCalledWith("session gone", 404);
    expect(store.draftPrompts.length).toBe(1);
    expect(store.prompts.length).toBe(0);
  });
});
