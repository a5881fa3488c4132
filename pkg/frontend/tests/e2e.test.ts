// End-to-end console session against a live `oxyfield serve` process running
// the props phantom: draw a roi over the gauze patch, confirm the ack and
// white-reference event, watch classified frames appear, verify the roi
// coordinate round-trip, and check that view-mode and threshold changes take
// effect at their acked frame ids.

import { ChildProcess, spawn } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { WebSocket as NodeWebSocket } from "ws";

import { ConsoleClient, SocketLike } from "../src/client.js";
import { FrameMeta, controls } from "../src/protocol.js";
import { RoiDrag, fitTransform, sceneRectToCanvas, sceneToCanvas } from "../src/roi.js";
import { DisplayFrame, SessionState } from "../src/session.js";

const PORT = 20000 + Math.floor(Math.random() * 20000);
const FPS = 1;
const FRAME_PERIOD_MS = 1000 / FPS;
// props phantom on the s5 profile: 290x275 scene, gauze patch at x 2..60, y 2..57
const SCENE_W = 290;
const SCENE_H = 275;

let server: ChildProcess;
let client: ConsoleClient;
let session: SessionState;
const metas: FrameMeta[] = [];
const rendered: DisplayFrame[] = [];
let pump: ReturnType<typeof setInterval>;

function nodeSocketFactory(url: string): SocketLike {
  const ws = new NodeWebSocket(url);
  const adapter: SocketLike = {
    binaryType: "arraybuffer",
    readyState: 0,
    onopen: null,
    onmessage: null,
    onclose: null,
    onerror: null,
    send: (data: string) => ws.send(data),
    close: () => ws.close(),
  };
  ws.on("open", () => {
    adapter.readyState = 1;
    adapter.onopen?.();
  });
  ws.on("message", (data: Buffer, isBinary: boolean) => {
    const payload = isBinary
      ? data.buffer.slice(data.byteOffset, data.byteOffset + data.byteLength)
      : data.toString("utf8");
    adapter.onmessage?.({ data: payload });
  });
  ws.on("close", () => {
    adapter.readyState = 3;
    adapter.onclose?.();
  });
  ws.on("error", () => adapter.onerror?.());
  return adapter;
}

async function waitFor<T>(probe: () => T | null | undefined | false, what: string,
                          timeoutMs = 30000): Promise<T> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const value = probe();
    if (value !== null && value !== undefined && value !== false) return value;
    if (Date.now() > deadline) throw new Error(`timed out waiting for ${what}`);
    await new Promise((r) => setTimeout(r, 20));
  }
}

beforeAll(async () => {
  server = spawn("oxyfield", [
    "serve", "--scenario", "props", "--port", String(PORT), "--fps", String(FPS),
  ], { stdio: ["ignore", "ignore", "pipe"] });
  let banner = "";
  server.stderr!.on("data", (chunk: Buffer) => (banner += chunk.toString()));
  await waitFor(() => banner.includes("serving ws://"), "server startup banner", 60000);

  session = new SessionState();
  const origHandleText = session.handleText.bind(session);
  session.handleText = (text) => {
    const doc = origHandleText(text);
    if (doc.type === "frame") metas.push(doc);
    return doc;
  };
  client = new ConsoleClient(`ws://127.0.0.1:${PORT}/stream`, session, {
    socketFactory: nodeSocketFactory,
  });
  client.connect();
  pump = setInterval(() => {
    const frame = session.takeForRender();
    if (frame !== null) rendered.push(frame);
  }, 10);
  await waitFor(() => session.connection === "open", "websocket open", 15000);
}, 90000);

afterAll(async () => {
  clearInterval(pump);
  client?.close();
  if (server && server.exitCode === null) {
    server.kill("SIGTERM");
    await new Promise<void>((resolve) => {
      const killTimer = setTimeout(() => {
        server.kill("SIGKILL");
        resolve();
      }, 5000);
      server.once("exit", () => {
        clearTimeout(killTimer);
        resolve();
      });
    });
  }
});

describe("console end-to-end against the props scenario", () => {
  it("streams decodable frames with matching header and metadata", async () => {
    const frame = await waitFor(() => rendered[0], "first rendered frame");
    expect(frame.header.width).toBe(SCENE_W);
    expect(frame.header.height).toBe(SCENE_H);
    expect(frame.meta.frame_id).toBe(frame.header.frameId);
    expect(frame.payload.length).toBe(frame.header.payloadLen);
  }, 60000);

  it("acks a gauze roi drag, updates the white reference, and keeps frames classified", async () => {
    // drag on a 3x-scaled canvas over the interior of the gauze patch
    const transform = fitTransform(870, 825, SCENE_W, SCENE_H);
    const drag = new RoiDrag(transform, SCENE_W, SCENE_H);
    const a = sceneToCanvas(transform, 5, 5);
    const b = sceneToCanvas(transform, 50, 48);
    drag.begin(a.x, a.y);
    drag.update(b.x, b.y);
    const result = drag.finish();
    expect(result.kind).toBe("roi");
    if (result.kind !== "roi") return;

    session.whiteUpdatedAt = null;
    const outcome = await client.send(controls.setRoi(session.allocateId(), result.rect));
    const ackedAt = Date.now();
    expect(outcome.ok).toBe(true);
    const roiFrameId = outcome.frameId!;

    await waitFor(() => session.whiteUpdatedAt !== null, "white-reference event", 15000);

    // classified output visible within two frame periods of the ack
    const classified = await waitFor(
      () => metas.find((m) => m.frame_id >= roiFrameId && !m.uncalibrated
                              && m.so2_histogram !== null),
      "classified frame after roi ack", 15000);
    expect(Date.now() - ackedAt).toBeLessThanOrEqual(2 * FRAME_PERIOD_MS + 200);
    expect(classified.mean_so2).not.toBeNull();

    // roi coordinate round-trip: server echo matches the sent rectangle and
    // redraws on the canvas within one pixel of the original drag
    const stats = await client.send(controls.requestStats(session.allocateId()));
    expect(stats.ok).toBe(true);
    const echo = session.stats!.config.roi!;
    expect(Math.abs(echo.x - result.rect.x)).toBeLessThanOrEqual(1);
    expect(Math.abs(echo.y - result.rect.y)).toBeLessThanOrEqual(1);
    expect(Math.abs(echo.width - result.rect.width)).toBeLessThanOrEqual(1);
    expect(Math.abs(echo.height - result.rect.height)).toBeLessThanOrEqual(1);
    const redrawn = sceneRectToCanvas(transform, echo);
    const original = drag.canvasRect();
    expect(Math.abs(redrawn.x - original.x)).toBeLessThanOrEqual(transform.scale);
    expect(Math.abs(redrawn.y - original.y)).toBeLessThanOrEqual(transform.scale);
  }, 60000);

  it("applies a view-mode switch exactly at its acked frame id", async () => {
    const outcome = await client.send(controls.setOverlayMode(session.allocateId(), "rgb"));
    expect(outcome.ok).toBe(true);
    const switchId = outcome.frameId!;

    await waitFor(() => metas.find((m) => m.frame_id >= switchId), "post-switch frame", 15000);
    for (const m of metas) {
      if (m.frame_id >= switchId) expect(m.mode).toBe("rgb");
      // frame id switchId-1 may be announced concurrently with the boundary;
      // everything older must still carry the previous mode
      if (m.frame_id < switchId - 1) expect(m.mode).toBe("composite");
    }
  }, 60000);

  it("applies a threshold change at its acked frame id and echoes it in stats", async () => {
    const outcome = await client.send(controls.setThreshold(session.allocateId(), 0.3));
    expect(outcome.ok).toBe(true);
    const thresholdId = outcome.frameId!;

    await waitFor(() => metas.find((m) => m.frame_id >= thresholdId),
                  "post-threshold frame", 15000);
    const stats = await client.send(controls.requestStats(session.allocateId()));
    expect(stats.ok).toBe(true);
    expect(session.stats!.config["sam_threshold_rad"]).toBe(0.3);
  }, 60000);
});
