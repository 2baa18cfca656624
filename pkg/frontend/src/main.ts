/** Steering console: connects to the live service, renders frames, and
 * turns pointer/slider interaction into protocol commands.
 *
 * Socket events only store the latest decoded frame; the render loop
 * consumes it once per animation tick, so a fast server never outruns the
 * UI (older frames are simply skipped).
 */

import {
  Command, Descriptor, Frame, commandError, decodeFrame, isDescriptor,
} from "./protocol.js";
import {
  BrushTool, ViewState, fitView, pickTraced, renderFrame,
} from "./view.js";
import { Gesture, pointerToCommand, sliderToCommand } from "./input.js";

const $ = <T extends HTMLElement>(id: string): T =>
  document.getElementById(id) as T;

const canvas = $<HTMLCanvasElement>("canvas");
const ctx = canvas.getContext("2d")!;

let socket: WebSocket | null = null;
let descriptor: Descriptor | null = null;
let view: ViewState | null = null;
let latest: Frame | null = null;
let lastRendered = -1;
let rgb = new Float32Array(0);
let image: ImageData | null = null;

function status(text: string, cls: string): void {
  const el = $("status");
  el.textContent = text;
  el.className = cls;
}

function toast(text: string): void {
  const el = $("toast");
  el.textContent = text;
  el.classList.add("show");
  setTimeout(() => el.classList.remove("show"), 4000);
}

function send(cmd: Command): void {
  if (!socket || socket.readyState !== WebSocket.OPEN || !descriptor) return;
  const bad = commandError(cmd, descriptor.d);
  if (bad) {
    toast(`not sent: ${bad}`);
    return;
  }
  socket.send(JSON.stringify(cmd));
}

function applyDescriptor(desc: Descriptor): void {
  descriptor = desc;
  if (!view) {
    view = fitView(desc.window.lo, desc.window.side,
                   canvas.width, canvas.height);
    rgb = new Float32Array(canvas.width * canvas.height * 3);
    image = ctx.createImageData(canvas.width, canvas.height);
  }
  view.splatRadiusPx = desc.params.splat_radius;
  ($<HTMLInputElement>("eps")).value = String(desc.params.eps);
  ($<HTMLInputElement>("p")).value = String(desc.params.p);
  ($<HTMLInputElement>("spf")).value = String(desc.params.steps_per_frame);
  ($<HTMLInputElement>("splat")).value = String(desc.params.splat_radius);
  $("models").textContent = desc.models
    .map((m, i) => `${i}: ${m} (${desc.species_counts[i]})`).join("  ");
  $("pausestate").textContent = desc.paused ? "paused" : "running";
  if (desc.error) toast(`numeric fault: ${desc.error}`);
  updateLag();
}

function updateLag(): void {
  if (!descriptor) return;
  const lag = Math.max(0, descriptor.frame - 1 - lastRendered);
  $("lag").textContent =
    `frame ${lastRendered} | lag ${lag} | drops ${descriptor.dropped_frames}`;
}

function connect(): void {
  const url = ($<HTMLInputElement>("url")).value;
  socket?.close();
  socket = new WebSocket(url);
  socket.binaryType = "arraybuffer";
  status("connecting", "warn");
  socket.onopen = () => status("connected", "ok");
  socket.onclose = () => status("disconnected", "err");
  socket.onerror = () => status("socket error", "err");
  socket.onmessage = (ev: MessageEvent) => {
    if (typeof ev.data === "string") {
      const msg = JSON.parse(ev.data);
      if (isDescriptor(msg)) applyDescriptor(msg);
      else if (msg.type === "error") toast(msg.message);
      return;
    }
    if (!descriptor) return; // no geometry yet
    try {
      latest = decodeFrame(ev.data as ArrayBuffer, descriptor);
    } catch (e) {
      toast(String(e));
    }
  };
}

function loop(): void {
  if (latest && view && image) {
    renderFrame(latest, view, rgb);
    const px = image.data;
    for (let i = 0, o = 0; i < rgb.length; i += 3, o += 4) {
      px[o] = rgb[i] * 255;
      px[o + 1] = rgb[i + 1] * 255;
      px[o + 2] = rgb[i + 2] * 255;
      px[o + 3] = 255;
    }
    ctx.putImageData(image, 0, 0);
    lastRendered = latest.index;
    $("tick").textContent = `${latest.tickMs.toFixed(1)} ms` +
      (latest.paused ? " (paused)" : "") + (latest.error ? " FAULT" : "");
    updateLag();
    latest = null;
  }
  requestAnimationFrame(loop);
}

let gesture: Gesture | null = null;

canvas.addEventListener("pointerdown", (ev) => {
  const r = canvas.getBoundingClientRect();
  gesture = {
    sxStart: ev.clientX - r.left, syStart: ev.clientY - r.top,
    sxEnd: ev.clientX - r.left, syEnd: ev.clientY - r.top,
  };
});
canvas.addEventListener("pointermove", (ev) => {
  if (!gesture) return;
  const r = canvas.getBoundingClientRect();
  gesture.sxEnd = ev.clientX - r.left;
  gesture.syEnd = ev.clientY - r.top;
});
window.addEventListener("pointerup", () => {
  if (!gesture || !view) return;
  const cmd = pointerToCommand(gesture, view);
  gesture = null;
  if (cmd) send(cmd);
});

function wire(): void {
  $("connect").onclick = connect;
  for (const tool of ["zero", "push", "pull"] as BrushTool[]) {
    $(`tool-${tool}`).onclick = () => {
      if (!view) return;
      view.brush = tool;
      for (const t of ["zero", "push", "pull"]) {
        $(`tool-${t}`).classList.toggle("active", t === tool);
      }
    };
  }
  ($<HTMLInputElement>("bradius")).oninput = (ev) => {
    if (view) view.brushRadius = Number((ev.target as HTMLInputElement).value);
  };
  ($<HTMLInputElement>("bstrength")).oninput = (ev) => {
    if (view) {
      view.brushStrength = Number((ev.target as HTMLInputElement).value);
    }
  };
  const slider = (id: string,
                  name: "eps" | "p" | "steps_per_frame" | "splat_radius") => {
    ($<HTMLInputElement>(id)).onchange = (ev) => {
      const v = Number((ev.target as HTMLInputElement).value);
      send(sliderToCommand(name, name === "steps_per_frame"
        ? Math.round(v) : v));
      if (name === "splat_radius" && view) view.splatRadiusPx = v;
    };
  };
  slider("eps", "eps");
  slider("p", "p");
  slider("spf", "steps_per_frame");
  slider("splat", "splat_radius");
  $("pause").onclick = () => send({ kind: "pause" });
  $("resume").onclick = () => send({ kind: "resume" });
  $("reset").onclick = () => send({
    kind: "reset",
    seed_kind: ($<HTMLSelectElement>("seedkind")).value as "egg" | "square",
    assign: ($<HTMLSelectElement>("assign")).value as
      "interleave" | "partition",
  });
  ($<HTMLInputElement>("trace")).onchange = (ev) => {
    if (!view) return;
    view.traceEnabled = (ev.target as HTMLInputElement).checked;
    if (view.traceEnabled && descriptor) {
      view.traced = pickTraced(descriptor.n);
    }
  };
}

wire();
connect();
requestAnimationFrame(loop);
