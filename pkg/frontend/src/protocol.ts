/** Wire types for the live service, implementing protocol.md exactly.
 *
 * Frames arrive as binary websocket messages: a 16-byte little-endian
 * header (magic "NPAF", version, flags, reserved, frame index, N) followed
 * by positions, colors, species ids, and the tick wall time. Positions are
 * u16 fixed point over the descriptor's world window unless flag bit 0
 * marks them float32. Everything else on the socket is JSON.
 */

export const MAGIC = 0x4641504e; // the bytes "NPAF" read as an LE u32
export const VERSION = 1;

export const FLAG_FLOAT32 = 1;
export const FLAG_PAUSED = 2;
export const FLAG_ERROR = 4;
export const FLAG_STATES = 8;

export interface Descriptor {
  type: "descriptor";
  version: number;
  d: number;
  n: number;
  c: number;
  window: { lo: number[]; side: number };
  models: string[];
  species_counts: number[];
  params: {
    eps: number;
    p: number;
    steps_per_frame: number;
    splat_radius: number;
  };
  paused: boolean;
  error: string | null;
  frame: number;
  dropped_frames: number;
  dropped_commands: number;
  float_positions: boolean;
  seed: number;
}

export interface Frame {
  index: number;
  n: number;
  flags: number;
  paused: boolean;
  error: boolean;
  /** world-space positions, length n*d, particle-major */
  positions: Float32Array;
  /** rgb bytes, length n*3 */
  colors: Uint8Array;
  /** model index per particle, length n */
  species: Uint8Array;
  tickMs: number;
  /** raw states (n*c), only on debug frames (flag bit 3) */
  states: Float32Array | null;
}

/** Decode one binary frame using the window geometry from the descriptor.
 * Throws on bad magic, version, or a size mismatch, so a corrupt message
 * can never render. */
export function decodeFrame(buf: ArrayBuffer, desc: Descriptor): Frame {
  if (buf.byteLength < 16) throw new Error("frame shorter than its header");
  const view = new DataView(buf);
  if (view.getUint32(0, true) !== MAGIC) throw new Error("bad frame magic");
  const version = view.getUint8(4);
  if (version !== VERSION) throw new Error(`unknown frame version ${version}`);
  const flags = view.getUint8(5);
  const index = view.getUint32(8, true);
  const n = view.getUint32(12, true);
  const d = desc.d;
  let off = 16;

  const positions = new Float32Array(n * d);
  if (flags & FLAG_FLOAT32) {
    need(buf, off, n * d * 4);
    for (let i = 0; i < n * d; i++) {
      positions[i] = view.getFloat32(off + i * 4, true);
    }
    off += n * d * 4;
  } else {
    need(buf, off, n * d * 2);
    const side = desc.window.side;
    for (let i = 0; i < n * d; i++) {
      const q = view.getUint16(off + i * 2, true);
      positions[i] = desc.window.lo[i % d] + (q / 65535) * side;
    }
    off += n * d * 2;
  }

  need(buf, off, n * 3);
  const colors = new Uint8Array(buf.slice(off, off + n * 3));
  off += n * 3;
  need(buf, off, n);
  const species = new Uint8Array(buf.slice(off, off + n));
  off += n;
  need(buf, off, 4);
  const tickMs = view.getFloat32(off, true);
  off += 4;

  let states: Float32Array | null = null;
  if (flags & FLAG_STATES) {
    need(buf, off, n * desc.c * 4);
    states = new Float32Array(n * desc.c);
    for (let i = 0; i < states.length; i++) {
      states[i] = view.getFloat32(off + i * 4, true);
    }
    off += n * desc.c * 4;
  }
  if (off !== buf.byteLength) throw new Error("frame size mismatch");
  return {
    index, n, flags,
    paused: (flags & FLAG_PAUSED) !== 0,
    error: (flags & FLAG_ERROR) !== 0,
    positions, colors, species, tickMs, states,
  };
}

function need(buf: ArrayBuffer, off: number, bytes: number): void {
  if (off + bytes > buf.byteLength) throw new Error("truncated frame");
}

export type Command =
  | { kind: "brush_zero"; center: number[]; radius: number }
  | { kind: "brush_push"; center: number[]; radius: number;
      strength: number; direction: number[] }
  | { kind: "brush_pull"; center: number[]; radius: number;
      strength: number }
  | { kind: "set_param"; name: "eps" | "p" | "steps_per_frame" |
      "splat_radius"; value: number }
  | { kind: "reset"; seed_kind?: "egg" | "square";
      assign?: "interleave" | "partition"; seed?: number }
  | { kind: "load_model"; path: string }
  | { kind: "pause" }
  | { kind: "resume" };

export const PARAM_RANGES: Record<string, [number, number]> = {
  eps: [1e-4, 10],
  p: [1e-6, 1],
  steps_per_frame: [0, 64],
  splat_radius: [0.1, 64],
};

/** The client-side mirror of the server's validation: returns null when
 * the command is protocol-valid, otherwise the reason. Everything sent on
 * the socket must pass this first. */
export function commandError(cmd: Command, d: number): string | null {
  const vec = (v: unknown): v is number[] =>
    Array.isArray(v) && v.length === d &&
    v.every((c) => typeof c === "number" && Number.isFinite(c));
  const num = (v: unknown): v is number =>
    typeof v === "number" && Number.isFinite(v);
  switch (cmd.kind) {
    case "brush_zero":
    case "brush_push":
    case "brush_pull": {
      if (!vec(cmd.center)) return `center must be ${d} finite numbers`;
      if (!num(cmd.radius) || cmd.radius <= 0) {
        return "radius must be positive";
      }
      if (cmd.kind !== "brush_zero" && !num(cmd.strength)) {
        return "strength must be a finite number";
      }
      if (cmd.kind === "brush_push" && !vec(cmd.direction)) {
        return `direction must be ${d} finite numbers`;
      }
      return null;
    }
    case "set_param": {
      const range = PARAM_RANGES[cmd.name];
      if (!range) return `unknown parameter ${cmd.name}`;
      if (!num(cmd.value) || cmd.value < range[0] || cmd.value > range[1]) {
        return `${cmd.name} must be in [${range[0]}, ${range[1]}]`;
      }
      if (cmd.name === "steps_per_frame" &&
          !Number.isInteger(cmd.value)) {
        return "steps_per_frame must be an integer";
      }
      return null;
    }
    case "reset": {
      if (cmd.seed_kind !== undefined &&
          cmd.seed_kind !== "egg" && cmd.seed_kind !== "square") {
        return "seed_kind must be egg or square";
      }
      if (cmd.assign !== undefined &&
          cmd.assign !== "interleave" && cmd.assign !== "partition") {
        return "assign must be interleave or partition";
      }
      if (cmd.seed !== undefined &&
          (!Number.isInteger(cmd.seed) || cmd.seed < 0)) {
        return "seed must be a non-negative integer";
      }
      return null;
    }
    case "load_model":
      return cmd.path ? null : "load_model needs a checkpoint path";
    case "pause":
    case "resume":
      return null;
  }
}

export function isDescriptor(msg: unknown): msg is Descriptor {
  return typeof msg === "object" && msg !== null &&
    (msg as { type?: string }).type === "descriptor";
}
