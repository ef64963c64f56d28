/*
 * Mask overlay and prompt marker rendering.
 *
 * Overlays are built at native mask resolution as ImageData and scaled by
 * the canvas transform when drawn, so no client-side resampling ever decides
 * what is "inside" the mask: the service's pixels are the truth.
 */

import { decodeRle, type RleMask } from "./rle.js";
import { imageToDisplay, type ViewTransform } from "./coords.js";
import type { Prompt } from "./state.js";

export const MASK_FILL = { r: 64, g: 156, b: 255 };
export const POSITIVE_COLOR = "#2e7df6";
export const NEGATIVE_COLOR = "#e5484d";

export function maskToImageData(mask: RleMask, alpha: number): ImageData {
  const bits = decodeRle(mask.h, mask.w, mask.rle);
  const data = new Uint8ClampedArray(mask.h * mask.w * 4);
  const a = Math.round(alpha * 255);
  for (let i = 0; i < bits.length; i++) {
    if (bits[i]) {
      const o = i * 4;
      data[o] = MASK_FILL.r;
      data[o + 1] = MASK_FILL.g;
      data[o + 2] = MASK_FILL.b;
      data[o + 3] = a;
    }
  }
  return new ImageData(data, mask.w, mask.h);
}

/** Offscreen canvas holding the overlay at native resolution. */
export function buildOverlayCanvas(mask: RleMask, alpha: number): HTMLCanvasElement {
  const canvas = document.createElement("canvas");
  canvas.width = mask.w;
  canvas.height = mask.h;
  const ctx = canvas.getContext("2d");
  if (ctx) {
    ctx.putImageData(maskToImageData(mask, alpha), 0, 0);
  }
  return canvas;
}

export function drawView(
  ctx: CanvasRenderingContext2D,
  image: CanvasImageSource | null,
  overlay: HTMLCanvasElement | null,
  prompts: Prompt[],
  view: number,
  t: ViewTransform,
  w: number,
  h: number,
): void {
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.imageSmoothingEnabled = false;
  if (image) {
    ctx.drawImage(image, t.offsetX, t.offsetY, w * t.scale, h * t.scale);
  }
  if (overlay) {
    ctx.drawImage(overlay, t.offsetX, t.offsetY, w * t.scale, h * t.scale);
  }
  for (const p of prompts) {
    if (p.view !== view) {
      continue;
    }
    const { x, y } = imageToDisplay({ row: p.row, col: p.col }, t);
    ctx.beginPath();
    ctx.arc(x, y, 5, 0, Math.PI * 2);
    ctx.fillStyle = p.polarity === 1 ? POSITIVE_COLOR : NEGATIVE_COLOR;
    ctx.fill();
    ctx.lineWidth = 1.5;
    ctx.strokeStyle = "#ffffff";
    ctx.stroke();
  }
}

/** Binary mask as a black/white PNG data URL for export. */
export function maskPngDataUrl(mask: RleMask): string {
  const bits = decodeRle(mask.h, mask.w, mask.rle);
  const canvas = document.createElement("canvas");
  canvas.width = mask.w;
  canvas.height = mask.h;
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    return "";
  }
  const data = ctx.createImageData(mask.w, mask.h);
  for (let i = 0; i < bits.length; i++) {
    const v = bits[i] ? 255 : 0;
    const o = i * 4;
    data.data[o] = v;
    data.data[o + 1] = v;
    data.data[o + 2] = v;
    data.data[o + 3] = 255;
  }
  ctx.putImageData(data, 0, 0);
  return canvas.toDataURL("image/png");
}
