/** View state and the software particle renderer.
 *
 * Rendering happens into a plain Float32Array rgb buffer so it is pure and
 * testable; the DOM layer blits that buffer into a canvas ImageData. Each
 * particle is a soft disc sprite composited with d*(1-a) + c*a per channel,
 * a convex blend, so overlapping sprites can never leave the color range.
 */

import { Frame } from "./protocol.js";

export type BrushTool = "zero" | "push" | "pull";

export interface ViewState {
  /** canvas size in pixels */
  width: number;
  height: number;
  /** world-to-screen: sx = (wx - originX) * scale, sy flips y */
  scale: number;
  originX: number;
  originY: number;
  splatRadiusPx: number;
  brush: BrushTool;
  brushRadius: number;   // world units
  brushStrength: number;
  traceEnabled: boolean;
  traced: Set<number>;   // particle indices drawn enlarged
}

/** Fit the world window from the descriptor into the canvas, centered,
 * preserving aspect. Scale is strictly positive so the transform is
 * always invertible. */
export function fitView(
  lo: number[], side: number, width: number, height: number,
): ViewState {
  const scale = Math.min(width, height) / side;
  return {
    width, height, scale,
    // center the window in the canvas
    originX: lo[0] - (width / scale - side) / 2,
    originY: lo[1] - (height / scale - side) / 2,
    splatRadiusPx: 4,
    brush: "push",
    brushRadius: 0.25,
    brushStrength: 0.05,
    traceEnabled: false,
    traced: new Set(),
  };
}

export function worldToScreen(
  view: ViewState, wx: number, wy: number,
): [number, number] {
  // +y up in world, +y down on screen
  return [
    (wx - view.originX) * view.scale,
    view.height - (wy - view.originY) * view.scale,
  ];
}

export function screenToWorld(
  view: ViewState, sx: number, sy: number,
): [number, number] {
  return [
    sx / view.scale + view.originX,
    (view.height - sy) / view.scale + view.originY,
  ];
}

/** Sprite opacity at normalized distance u from the center: smooth,
 * exactly 1 at the center and exactly 0 from the rim outward. */
export function spriteAlpha(u: number): number {
  if (u >= 1) return 0;
  const t = 1 - u * u;
  return t * t;
}

/** Draw a frame into an rgb float buffer (length width*height*3, values
 * in [0, 1]). The buffer is cleared first; an empty frame leaves it
 * cleared. Traced particles render with enlarged sprites. */
export function renderFrame(
  frame: Frame, view: ViewState, buffer: Float32Array,
): Float32Array {
  const { width, height } = view;
  buffer.fill(0);
  const base = view.splatRadiusPx;
  for (let i = 0; i < frame.n; i++) {
    const [sx, sy] = worldToScreen(
      view, frame.positions[i * 2], frame.positions[i * 2 + 1]);
    const r = view.traceEnabled && view.traced.has(i) ? base * 2.5 : base;
    const x0 = Math.max(0, Math.floor(sx - r));
    const x1 = Math.min(width - 1, Math.ceil(sx + r));
    const y0 = Math.max(0, Math.floor(sy - r));
    const y1 = Math.min(height - 1, Math.ceil(sy + r));
    if (x1 < x0 || y1 < y0) continue;
    const cr = frame.colors[i * 3] / 255;
    const cg = frame.colors[i * 3 + 1] / 255;
    const cb = frame.colors[i * 3 + 2] / 255;
    for (let py = y0; py <= y1; py++) {
      for (let px = x0; px <= x1; px++) {
        const dx = px + 0.5 - sx;
        const dy = py + 0.5 - sy;
        const a = spriteAlpha(Math.sqrt(dx * dx + dy * dy) / r);
        if (a <= 0) continue;
        const o = (py * width + px) * 3;
        buffer[o] = buffer[o] * (1 - a) + cr * a;
        buffer[o + 1] = buffer[o + 1] * (1 - a) + cg * a;
        buffer[o + 2] = buffer[o + 2] * (1 - a) + cb * a;
      }
    }
  }
  return buffer;
}

/** Pick a small random subset of particle indices for trace mode. */
export function pickTraced(n: number, count = 16): Set<number> {
  const out = new Set<number>();
  if (n <= 0) return out;
  while (out.size < Math.min(count, n)) {
    out.add(Math.floor(Math.random() * n));
  }
  return out;
}
