// Browser entry point: wires SessionState + ConsoleClient to the canvas and
// the operator controls.  Single render loop on requestAnimationFrame; all
// network events land in session state and are picked up on the next tick.

import { ConsoleClient } from "./client.js";
import { formatTimings, legendColor } from "./legend.js";
import { ENC_RGBA8, OVERLAY_MODES, OverlayMode, SceneRect, controls } from "./protocol.js";
import { RoiDrag, ViewTransform, fitTransform, sceneRectToCanvas } from "./roi.js";
import { SessionState } from "./session.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
};

const canvas = $<HTMLCanvasElement>("view");
const ctx = canvas.getContext("2d")!;
const statusEl = $<HTMLSpanElement>("status");
const hintEl = $<HTMLSpanElement>("hint");
const whiteAgeEl = $<HTMLSpanElement>("white-age");
const timingBody = $<HTMLTableSectionElement>("timing-body");
const modeSelect = $<HTMLSelectElement>("mode");
const thresholdInput = $<HTMLInputElement>("threshold");
const thresholdLabel = $<HTMLSpanElement>("threshold-value");
const distanceInput = $<HTMLInputElement>("distance");
const pauseButton = $<HTMLButtonElement>("pause");
const legendCanvas = $<HTMLCanvasElement>("legend");

const url = `ws://${location.host}/stream`;
const session = new SessionState();
const client = new ConsoleClient(url, session, {
  onStatusChange: (s) => (statusEl.textContent = s),
});

let paused = false;
let sceneWidth = 0;
let sceneHeight = 0;
let transform: ViewTransform | null = null;
let drag: RoiDrag | null = null;
let pendingRoi: SceneRect | null = null;
let echoedRoi: SceneRect | null = null;
let bitmap: ImageBitmap | null = null;

function showHint(text: string): void {
  hintEl.textContent = text;
}

async function decodeFrame(): Promise<void> {
  const frame = session.takeForRender();
  if (frame === null) return;
  sceneWidth = frame.header.width;
  sceneHeight = frame.header.height;
  transform = fitTransform(canvas.width, canvas.height, sceneWidth, sceneHeight);
  if (frame.header.encoding === ENC_RGBA8) {
    const img = new ImageData(new Uint8ClampedArray(frame.payload), sceneWidth, sceneHeight);
    bitmap = await createImageBitmap(img);
  } else {
    bitmap = await createImageBitmap(new Blob([frame.payload as BufferSource], { type: "image/png" }));
  }
  for (const [label, value] of formatTimings(frame.meta.timings)) {
    let row = document.getElementById(`row-${label}`);
    if (row === null) {
      row = document.createElement("tr");
      row.id = `row-${label}`;
      row.innerHTML = `<td>${label}</td><td class="num"></td>`;
      timingBody.appendChild(row);
    }
    row.children[1]!.textContent = value;
  }
  if (frame.meta.warnings.length > 0) showHint(frame.meta.warnings.join("; "));
}

function drawRect(rect: { x: number; y: number; width: number; height: number }, style: string): void {
  ctx.strokeStyle = style;
  ctx.lineWidth = 2;
  ctx.strokeRect(rect.x, rect.y, rect.width, rect.height);
}

function render(): void {
  void decodeFrame().then(() => {
    ctx.fillStyle = "#111";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    if (bitmap !== null && transform !== null) {
      ctx.drawImage(
        bitmap,
        transform.offsetX,
        transform.offsetY,
        sceneWidth * transform.scale,
        sceneHeight * transform.scale,
      );
    }
    if (transform !== null) {
      if (echoedRoi !== null) drawRect(sceneRectToCanvas(transform, echoedRoi), "#2ecc71");
      if (pendingRoi !== null) drawRect(sceneRectToCanvas(transform, pendingRoi), "#f1c40f");
    }
    if (drag !== null) drawRect(drag.canvasRect(), "#ffffff");
    const age = session.whiteReferenceAgeMs();
    whiteAgeEl.textContent = age === null ? "none" : `${(age / 1000).toFixed(1)} s ago`;
    requestAnimationFrame(render);
  });
}

function drawLegend(): void {
  const g = legendCanvas.getContext("2d")!;
  const w = legendCanvas.width;
  for (let x = 0; x < w; x++) {
    const [r, gg, b] = legendColor(x / (w - 1));
    g.fillStyle = `rgb(${r},${gg},${b})`;
    g.fillRect(x, 0, 1, legendCanvas.height);
  }
}

async function refreshStats(): Promise<void> {
  await client.send(controls.requestStats(session.allocateId()));
  const roi = session.stats?.config.roi;
  echoedRoi = roi ?? null;
}

canvas.addEventListener("pointerdown", (ev) => {
  if (transform === null) return;
  drag = new RoiDrag(transform, sceneWidth, sceneHeight);
  const r = canvas.getBoundingClientRect();
  drag.begin(ev.clientX - r.left, ev.clientY - r.top);
});

canvas.addEventListener("pointermove", (ev) => {
  const r = canvas.getBoundingClientRect();
  drag?.update(ev.clientX - r.left, ev.clientY - r.top);
});

canvas.addEventListener("pointerup", () => {
  if (drag === null) return;
  const result = drag.finish();
  drag = null;
  if (result.kind === "too-small") {
    showHint(result.hint);
    return;
  }
  pendingRoi = result.rect;
  showHint("white-reference roi pending ack…");
  void client.send(controls.setRoi(session.allocateId(), result.rect)).then(async (outcome) => {
    pendingRoi = null;
    if (outcome.ok) {
      showHint(`roi acknowledged at frame ${outcome.frameId}`);
      await refreshStats();
    } else {
      showHint(`roi rejected: ${outcome.reason}`);
    }
  });
});

modeSelect.addEventListener("change", () => {
  void client.send(controls.setOverlayMode(session.allocateId(), modeSelect.value as OverlayMode));
});

thresholdInput.addEventListener("change", () => {
  const rad = Number(thresholdInput.value);
  thresholdLabel.textContent = rad.toFixed(3);
  void client.send(controls.setThreshold(session.allocateId(), rad));
});

distanceInput.addEventListener("change", () => {
  void client.send(controls.setWorkingDistance(session.allocateId(), Number(distanceInput.value)));
});

pauseButton.addEventListener("click", () => {
  const msg = paused ? controls.resume(session.allocateId()) : controls.pause(session.allocateId());
  void client.send(msg).then((outcome) => {
    if (outcome.ok) {
      paused = !paused;
      pauseButton.textContent = paused ? "Resume" : "Pause";
    }
  });
});

for (const mode of OVERLAY_MODES) {
  const opt = document.createElement("option");
  opt.value = mode;
  opt.textContent = mode;
  if (mode === "composite") opt.selected = true;
  modeSelect.appendChild(opt);
}

drawLegend();
client.connect();
setInterval(() => void refreshStats(), 5000);
requestAnimationFrame(render);
