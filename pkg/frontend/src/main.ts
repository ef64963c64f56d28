/* DOM wiring: scene picker, session lifecycle, thumbnail grid, zoomable
 * stage, prompt editing, export. All segmentation logic lives on the server;
 * everything here is presentation over the service API. */

import { ServiceClient, type SessionDescriptor } from "./api.js";
import { fitTransform, displayToImage, type ViewTransform } from "./coords.js";
import { buildOverlayCanvas, drawView, maskPngDataUrl } from "./overlay.js";
import { PromptStore, type Prompt } from "./state.js";
import type { RleMask } from "./rle.js";

const client = new ServiceClient("");

const sceneSelect = document.getElementById("scene-select") as HTMLSelectElement;
const checkpointSelect = document.getElementById("checkpoint-select") as HTMLSelectElement;
const loadButton = document.getElementById("load-button") as HTMLButtonElement;
const statusEl = document.getElementById("status") as HTMLSpanElement;
const banner = document.getElementById("banner") as HTMLDivElement;
const bannerText = document.getElementById("banner-text") as HTMLSpanElement;
const bannerReconnect = document.getElementById("banner-reconnect") as HTMLButtonElement;
const bannerDismiss = document.getElementById("banner-dismiss") as HTMLButtonElement;
const thumbs = document.getElementById("thumbs") as HTMLDivElement;
const stage = document.getElementById("stage") as HTMLCanvasElement;
const stageCtx = stage.getContext("2d") as CanvasRenderingContext2D;
const zoomInBtn = document.getElementById("zoom-in") as HTMLButtonElement;
const zoomOutBtn = document.getElementById("zoom-out") as HTMLButtonElement;
const zoomLabel = document.getElementById("zoom-label") as HTMLSpanElement;
const opacitySlider = document.getElementById("opacity") as HTMLInputElement;
const undoBtn = document.getElementById("undo") as HTMLButtonElement;
const redoBtn = document.getElementById("redo") as HTMLButtonElement;
const clearBtn = document.getElementById("clear") as HTMLButtonElement;
const exportBtn = document.getElementById("export") as HTMLButtonElement;

let session: SessionDescriptor | null = null;
let viewImages: HTMLImageElement[] = [];
let overlayCanvases: (HTMLCanvasElement | null)[] = [];
let thumbCanvases: HTMLCanvasElement[] = [];
let selectedView = 0;
let zoom = 1;
let panX = 0;
let panY = 0;

const store = new PromptStore(
  (prompts: Prompt[]) => {
    if (!session) {
      return Promise.reject(new Error("no active session"));
    }
    return client.updatePrompts(session.session_id, prompts);
  },
  {
    onChange: () => {
      rebuildOverlays();
      render();
    },
    onNotice: (message) => showBanner(message, false),
    onError: (message, status) => showBanner(message, status === 404),
  },
);

function showBanner(message: string, offerReconnect: boolean): void {
  bannerText.textContent = message;
  bannerReconnect.classList.toggle("hidden", !offerReconnect);
  banner.classList.remove("hidden");
}

function hideBanner(): void {
  banner.classList.add("hidden");
}

function setStatus(): void {
  if (!session) {
    statusEl.textContent = "no session";
    return;
  }
  const n = store.draftPrompts.length;
  statusEl.textContent = `${session.scene_id} · ${n} prompt${n === 1 ? "" : "s"}${store.busy ? " · updating…" : ""}`;
}

function currentTransform(): ViewTransform {
  if (!session) {
    return { scale: 1, offsetX: 0, offsetY: 0 };
  }
  return fitTransform(session.width, session.height, stage.width, stage.height, zoom, panX, panY);
}

function rebuildOverlays(): void {
  const alpha = Number(opacitySlider.value) / 100;
  overlayCanvases = [];
  for (const mask of store.overlays) {
    overlayCanvases[mask.view] = buildOverlayCanvas(mask, alpha);
  }
}

function render(): void {
  setStatus();
  if (!session) {
    stageCtx.clearRect(0, 0, stage.width, stage.height);
    return;
  }
  const t = currentTransform();
  drawView(
    stageCtx,
    viewImages[selectedView] ?? null,
    overlayCanvases[selectedView] ?? null,
    store.prompts,
    selectedView,
    t,
    session.width,
    session.height,
  );
  zoomLabel.textContent = `${zoom.toFixed(1)}x`;
  renderThumbOverlays();
}

function renderThumbOverlays(): void {
  if (!session) {
    return;
  }
  thumbCanvases.forEach((canvas, v) => {
    const ctx = canvas.getContext("2d");
    if (!ctx) {
      return;
    }
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    const overlay = overlayCanvases[v];
    if (overlay) {
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(overlay, 0, 0, canvas.width, canvas.height);
    }
  });
  document.querySelectorAll(".thumb").forEach((el, v) => {
    el.classList.toggle("selected", v === selectedView);
  });
}

function buildThumbs(): void {
  thumbs.innerHTML = "";
  thumbCanvases = [];
  if (!session) {
    return;
  }
  session.views.forEach((url, v) => {
    const wrap = document.createElement("div");
    wrap.className = "thumb" + (v === selectedView ? " selected" : "");
    const img = document.createElement("img");
    img.src = url;
    img.alt = `view ${v}`;
    const overlay = document.createElement("canvas");
    overlay.width = 100;
    overlay.height = 100;
    const tag = document.createElement("span");
    tag.className = "tag";
    tag.textContent = `v${v}`;
    wrap.append(img, overlay, tag);
    wrap.addEventListener("click", () => {
      selectedView = v;
      render();
    });
    thumbs.appendChild(wrap);
    thumbCanvases.push(overlay);
  });
}

async function loadCatalog(): Promise<void> {
  try {
    const catalog = await client.getCatalog();
    sceneSelect.innerHTML = "";
    for (const scene of catalog.scenes) {
      const opt = document.createElement("option");
      opt.value = scene.scene_id;
      opt.textContent = `${scene.scene_id} (${scene.n_views} views)`;
      sceneSelect.appendChild(opt);
    }
    checkpointSelect.innerHTML = "";
    for (const id of catalog.checkpoints) {
      const opt = document.createElement("option");
      opt.value = id;
      opt.textContent = id;
      checkpointSelect.appendChild(opt);
    }
  } catch (err) {
    showBanner(err instanceof Error ? err.message : String(err), false);
  }
}

async function openSession(): Promise<void> {
  if (!sceneSelect.value || !checkpointSelect.value) {
    showBanner("pick a scene and a checkpoint first", false);
    return;
  }
  hideBanner();
  if (session) {
    client.deleteSession(session.session_id).catch(() => undefined);
  }
  try {
    session = await client.createSession(sceneSelect.value, checkpointSelect.value);
  } catch (err) {
    showBanner(err instanceof Error ? err.message : String(err), false);
    return;
  }
  selectedView = 0;
  zoom = 1;
  panX = 0;
  panY = 0;
  store.clear();
  viewImages = session.views.map((url) => {
    const img = new Image();
    img.onload = () => render();
    img.src = url;
    return img;
  });
  buildThumbs();
  render();
}

async function reconnect(): Promise<void> {
  // The session died server-side; open a fresh one and replay the draft.
  hideBanner();
  if (!session) {
    return;
  }
  try {
    session = await client.createSession(session.scene_id, session.checkpoint_id);
  } catch (err) {
    showBanner(err instanceof Error ? err.message : String(err), false);
    return;
  }
  viewImages = session.views.map((url) => {
    const img = new Image();
    img.onload = () => render();
    img.src = url;
    return img;
  });
  buildThumbs();
  store.flush();
  render();
}

function onStageClick(ev: MouseEvent): void {
  if (!session) {
    return;
  }
  const rect = stage.getBoundingClientRect();
  const x = ((ev.clientX - rect.left) / rect.width) * stage.width;
  const y = ((ev.clientY - rect.top) / rect.height) * stage.height;
  const t = currentTransform();
  const p = displayToImage(x, y, t, session.width, session.height);
  if (!p) {
    return;
  }
  const tol = Math.max(1, Math.ceil(6 / t.scale));
  const hit = store.hitTest(selectedView, p.row, p.col, tol);
  if (hit >= 0) {
    store.removePrompt(hit);
    return;
  }
  const polarity = ev.shiftKey || ev.altKey || ev.ctrlKey ? -1 : 1;
  store.addPrompt({ view: selectedView, row: p.row, col: p.col, polarity });
}

function exportMasks(): void {
  if (!session || store.overlays.length === 0) {
    showBanner("nothing to export yet", false);
    return;
  }
  for (const mask of store.overlays as RleMask[]) {
    const url = maskPngDataUrl(mask);
    const a = document.createElement("a");
    a.href = url;
    a.download = `${session.scene_id}_view${mask.view}_mask.png`;
    a.click();
  }
}

// --- event wiring ---

let dragStart: { x: number; y: number; panX: number; panY: number } | null = null;
let dragged = false;

stage.addEventListener("pointerdown", (ev) => {
  dragStart = { x: ev.clientX, y: ev.clientY, panX, panY };
  dragged = false;
});

stage.addEventListener("pointermove", (ev) => {
  if (!dragStart) {
    return;
  }
  const dx = ev.clientX - dragStart.x;
  const dy = ev.clientY - dragStart.y;
  if (Math.abs(dx) + Math.abs(dy) > 4) {
    dragged = true;
    panX = dragStart.panX + dx;
    panY = dragStart.panY + dy;
    render();
  }
});

stage.addEventListener("pointerup", (ev) => {
  const wasDrag = dragged;
  dragStart = null;
  dragged = false;
  if (!wasDrag) {
    onStageClick(ev);
  }
});

stage.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  const next = ev.deltaY < 0 ? zoom * 1.25 : zoom / 1.25;
  zoom = Math.min(16, Math.max(1, next));
  if (zoom === 1) {
    panX = 0;
    panY = 0;
  }
  render();
});

zoomInBtn.addEventListener("click", () => {
  zoom = Math.min(16, zoom * 1.25);
  render();
});

zoomOutBtn.addEventListener("click", () => {
  zoom = Math.max(1, zoom / 1.25);
  if (zoom === 1) {
    panX = 0;
    panY = 0;
  }
  render();
});

opacitySlider.addEventListener("input", () => {
  rebuildOverlays();
  render();
});

undoBtn.addEventListener("click", () => store.undo());
redoBtn.addEventListener("click", () => store.redo());
clearBtn.addEventListener("click", () => {
  store.clear();
  render();
});
exportBtn.addEventListener("click", exportMasks);
loadButton.addEventListener("click", () => void openSession());
bannerDismiss.addEventListener("click", hideBanner);
bannerReconnect.addEventListener("click", () => void reconnect());

document.addEventListener("keydown", (ev) => {
  if ((ev.ctrlKey || ev.metaKey) && ev.key === "z" && !ev.shiftKey) {
    ev.preventDefault();
    store.undo();
  } else if ((ev.ctrlKey || ev.metaKey) && (ev.key === "y" || (ev.key === "z" && ev.shiftKey))) {
    ev.preventDefault();
    store.redo();
  }
});

void loadCatalog();
render();
