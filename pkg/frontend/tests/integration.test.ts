/*
 * End-to-end round trip against the real service: generate a small scene
 * corpus, train a toy checkpoint, boot the server, then drive the annotator
 * state machine the way the canvas handlers do, clicks included.
 */

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { ApiError, ServiceClient } from "../src/api.js";
import { displayToImage, fitTransform, imageToDisplay } from "../src/coords.js";
import { decodeRle, maskPixelCount, type RleMask } from "../src/rle.js";
import { PromptStore, type Prompt } from "../src/state.js";

const PORT = 8600 + (process.pid % 250);
const BASE = `http://127.0.0.1:${PORT}`;

let workdir: string;
let server: ChildProcess | undefined;
let client: ServiceClient;

function runCli(args: string[]): void {
  const result = spawnSync("python3", ["-m", "mvseg.cli", ...args], {
    encoding: "utf-8",
  });
  if (result.status !== 0) {
    throw new Error(`mvseg ${args[0]} failed:\n${result.stdout}\n${result.stderr}`);
  }
}

async function waitForServer(): Promise<void> {
  const deadline = Date.now() + 60_000;
  while (Date.now() < deadline) {
    try {
      const response = await fetch(`${BASE}/scenes`);
      if (response.ok) {
        return;
      }
    } catch {
      // not listening yet
    }
    await new Promise((resolve) => setTimeout(resolve, 250));
  }
  throw new Error("service did not come up");
}

async function waitFor(check: () => boolean, what: string): Promise<void> {
  const deadline = Date.now() + 15_000;
  while (Date.now() < deadline) {
    if (check()) {
      return;
    }
    await new Promise((resolve) => setTimeout(resolve, 20));
  }
  throw new Error(`timed out waiting for ${what}`);
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "annotator-e2e-"));
  const data = join(workdir, "data");
  const ckpt = join(workdir, "ckpt");
  runCli([
    "gen-data", "--out", data, "--scenes", "2", "--views", "3",
    "--height", "32", "--width", "32", "--objects", "2", "--seed", "7",
  ]);
  const config = join(workdir, "train.json");
  writeFileSync(
    config,
    JSON.stringify({
      pipeline: {
        n_frequencies: 8,
        low_conf_fraction: 0.0,
        encoder: { stride: 4, channels: [6, 8], output_dim: 16 },
        decoder: { embed_dim: 16, num_blocks: 1, num_heads: 2 },
      },
    }),
  );
  // serve scans --checkpoint-dir for one subdirectory per checkpoint
  runCli([
    "train", "--data", data, "--out", join(ckpt, "base"), "--config", config,
    "--steps", "5", "--batch-size", "2", "--seed", "0",
  ]);
  server = spawn(
    "python3",
    ["-m", "mvseg.cli", "serve", "--host", "127.0.0.1", "--port", String(PORT),
     "--data-dir", data, "--checkpoint-dir", ckpt],
    { stdio: ["ignore", "ignore", "inherit"] },
  );
  await waitForServer();
  client = new ServiceClient(BASE);
});

afterAll(() => {
  server?.kill("SIGTERM");
  if (workdir) {
    rmSync(workdir, { recursive: true, force: true });
  }
});

describe("annotation round trip", () => {
  it("lists the generated scenes and the trained checkpoint", async () => {
    const catalog = await client.getCatalog();
    expect(catalog.scenes.length).toBe(2);
    expect(catalog.scenes[0].n_views).toBe(3);
    expect(catalog.checkpoints.length).toBe(1);
  });

  it("clicking through a zoomed canvas produces overlays on every view", async () => {
    const catalog = await client.getCatalog();
    const scene = catalog.scenes[0];
    const session = await client.createSession(scene.scene_id, catalog.checkpoints[0]);
    expect(session.views.length).toBe(3);

    let changes = 0;
    const store = new PromptStore(
      (prompts) => client.updatePrompts(session.session_id, prompts),
      {
        onChange: () => {
          changes += 1;
        },
        onNotice: () => {},
        onError: (message) => {
          throw new Error(`store error: ${message}`);
        },
      },
    );

    // Click where the handler would: map target image pixels to display
    // coordinates under a zoomed, panned transform, then run the inverse
    // the pointer handler applies.
    const t = fitTransform(scene.width, scene.height, 640, 640, 2.0, 12, -9);
    const targets: Prompt[] = [
      { view: 0, row: 16, col: 16, polarity: 1 },
      { view: 0, row: 8, col: 20, polarity: 1 },
      { view: 0, row: 22, col: 9, polarity: 1 },
      { view: 0, row: 2, col: 2, polarity: -1 },
    ];
    for (const target of targets) {
      const { x, y } = imageToDisplay({ row: target.row, col: target.col }, t);
      const hit = displayToImage(x, y, t, scene.width, scene.height);
      expect(hit).not.toBeNull();
      store.addPrompt({ view: target.view, row: hit!.row, col: hit!.col, polarity: target.polarity });
    }

    await waitFor(() => !store.busy && store.prompts.length === 4, "acknowledged prompts");
    expect(store.prompts).toEqual(targets);

    const overlays = store.overlays;
    expect(overlays.length).toBe(3);
    expect(overlays.map((m) => m.view)).toEqual([0, 1, 2]);
    for (const mask of overlays) {
      expect(mask.h).toBe(scene.height);
      expect(mask.w).toBe(scene.width);
      const pixels = decodeRle(mask.h, mask.w, mask.rle);
      expect(pixels.length).toBe(mask.h * mask.w);
      expect(maskPixelCount(mask)).toBeLessThanOrEqual(mask.h * mask.w);
    }
    expect(changes).toBeGreaterThan(0);

    await client.deleteSession(session.session_id);
  });

  it("replays the identical prompt list byte for byte", async () => {
    const catalog = await client.getCatalog();
    const session = await client.createSession(
      catalog.scenes[1].scene_id,
      catalog.checkpoints[0],
    );
    const body = JSON.stringify({
      prompts: [{ view: 1, row: 10, col: 12, polarity: 1 }],
    });
    const post = () =>
      fetch(`${BASE}/sessions/${session.session_id}/prompts`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body,
      }).then((r) => r.text());
    const first = await post();
    const second = await post();
    expect(second).toBe(first);
    await client.deleteSession(session.session_id);
  });

  it("serves view images as PNG", async () => {
    const catalog = await client.getCatalog();
    const session = await client.createSession(
      catalog.scenes[0].scene_id,
      catalog.checkpoints[0],
    );
    const response = await fetch(client.viewImageUrl(session.session_id, 0));
    expect(response.status).toBe(200);
    const bytes = new Uint8Array(await response.arrayBuffer());
    expect(Array.from(bytes.slice(0, 4))).toEqual([0x89, 0x50, 0x4e, 0x47]);
    await client.deleteSession(session.session_id);
  });

  it("surfaces service errors with status and code", async () => {
    await expect(client.createSession("no-such-scene", "nope")).rejects.toMatchObject({
      status: 404,
    });
    const error = await client
      .updatePrompts("stale-session", [{ view: 0, row: 0, col: 0, polarity: 1 }])
      .catch((e: ApiError) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect((error as ApiError).status).toBe(404);
  });
});
