/*
 * Run-length mask codec matching the service wire format: row-major scan,
 * alternating run lengths, first entry counting zeros (a leading 0 means the
 * mask starts with ones). Decoding is the hot path; encoding exists for
 * round-trip tests against the shared golden fixtures.
 */

export interface RleMask {
  view: number;
  h: number;
  w: number;
  rle: number[];
}

export function decodeRle(h: number, w: number, runs: number[]): Uint8Array {
  const total = runs.reduce((a, b) => a + b, 0);
  if (total !== h * w) {
    throw new Error(`run lengths sum to ${total}, expected ${h * w}`);
  }
  const out = new Uint8Array(h * w);
  let pos = 0;
  let value = 0;
  for (const run of runs) {
    if (run < 0) {
      throw new Error("run lengths must be nonnegative");
    }
    if (value) {
      out.fill(1, pos, pos + run);
    }
    pos += run;
    value ^= 1;
  }
  return out;
}

export function encodeRle(mask: Uint8Array | number[]): number[] {
  if (mask.length === 0) {
    return [];
  }
  const runs: number[] = [];
  let current = mask[0] ? 1 : 0;
  let length = 0;
  if (current === 1) {
    runs.push(0);
  }
  for (let i = 0; i < mask.length; i++) {
    const bit = mask[i] ? 1 : 0;
    if (bit === current) {
      length++;
    } else {
      runs.push(length);
      current = bit;
      length = 1;
    }
  }
  runs.push(length);
  return runs;
}

export function maskPixelCount(runs: number[]): number {
  // Every odd-indexed run is a run of ones.
  let count = 0;
  for (let i = 1; i < runs.length; i += 2) {
    count += runs[i];
  }
  return count;
}
