/*
 * Display <-> image coordinate mapping for the zoomable main view.
 *
 * The image is drawn letterboxed into the canvas at `scale` with its top-left
 * at (offsetX, offsetY) in canvas pixels. Prompts must reach the service in
 * exact integer image pixels, so the inverse transform floors into pixel
 * cells rather than rounding: a click anywhere inside a displayed pixel's
 * rectangle names that pixel.
 */

export interface ViewTransform {
  scale: number;
  offsetX: number;
  offsetY: number;
}

export interface ImagePoint {
  row: number;
  col: number;
}

/** Transform that letterboxes an h x w image into a cw x ch canvas at zoom. */
export function fitTransform(
  w: number,
  h: number,
  cw: number,
  ch: number,
  zoom: number,
  panX = 0,
  panY = 0,
): ViewTransform {
  const base = Math.min(cw / w, ch / h);
  const scale = base * zoom;
  return {
    scale,
    offsetX: (cw - w * scale) / 2 + panX,
    offsetY: (ch - h * scale) / 2 + panY,
  };
}

export function displayToImage(
  x: number,
  y: number,
  t: ViewTransform,
  w: number,
  h: number,
): ImagePoint | null {
  const col = Math.floor((x - t.offsetX) / t.scale);
  const row = Math.floor((y - t.offsetY) / t.scale);
  if (row < 0 || row >= h || col < 0 || col >= w) {
    return null;
  }
  return { row, col };
}

/** Center of an image pixel in display coordinates (marker placement). */
export function imageToDisplay(p: ImagePoint, t: ViewTransform): { x: number; y: number } {
  return {
    x: t.offsetX + (p.col + 0.5) * t.scale,
    y: t.offsetY + (p.row + 0.5) * t.scale,
  };
}
