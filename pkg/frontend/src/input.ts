/** Pointer gestures and slider changes mapped to protocol commands.
 *
 * A gesture is the summary of one pointer interaction in screen space.
 * Drags with the push tool become brush_push along the stroke; clicks
 * become brush_zero or brush_pull per the selected tool. A zero-length
 * drag is a click. All returned commands are protocol-valid by
 * construction but callers still schema-check before sending.
 */

import { Command } from "./protocol.js";
import { ViewState, screenToWorld } from "./view.js";

export interface Gesture {
  sxStart: number;
  syStart: number;
  sxEnd: number;
  syEnd: number;
}

/** Screen-space drag length below which a gesture counts as a click. */
export const CLICK_SLOP_PX = 3;

export function pointerToCommand(
  gesture: Gesture, view: ViewState,
): Command | null {
  const [wx0, wy0] = screenToWorld(view, gesture.sxStart, gesture.syStart);
  const [wx1, wy1] = screenToWorld(view, gesture.sxEnd, gesture.syEnd);
  const dxs = gesture.sxEnd - gesture.sxStart;
  const dys = gesture.syEnd - gesture.syStart;
  const isDrag = Math.hypot(dxs, dys) > CLICK_SLOP_PX;

  if (view.brush === "push") {
    if (!isDrag) return null; // a push needs a stroke direction
    const dx = wx1 - wx0;
    const dy = wy1 - wy0;
    const len = Math.hypot(dx, dy);
    return {
      kind: "brush_push",
      center: [(wx0 + wx1) / 2, (wy0 + wy1) / 2],
      radius: view.brushRadius,
      strength: view.brushStrength,
      direction: [dx / len, dy / len],
    };
  }
  const center = [wx0, wy0];
  if (view.brush === "zero") {
    return { kind: "brush_zero", center, radius: view.brushRadius };
  }
  return {
    kind: "brush_pull", center, radius: view.brushRadius,
    strength: view.brushStrength,
  };
}

export function sliderToCommand(
  name: "eps" | "p" | "steps_per_frame" | "splat_radius", value: number,
): Command {
  return { kind: "set_param", name, value };
}
