// Wire protocol for the /stream WebSocket endpoint.
//
// Text frames carry JSON documents both ways: control messages in, frame
// metadata / stats / ack / nack / event documents out.  Binary frames carry
// image payloads prefixed by a fixed 32-byte little-endian header:
//   bytes 0..3   magic "OXF1"
//   bytes 4..5   u16 protocol version (1)
//   bytes 6..7   u16 encoding (0 = PNG, 1 = raw RGBA8)
//   bytes 8..15  u64 frame id
//   bytes 16..19 u32 width
//   bytes 20..23 u32 height
//   bytes 24..27 u32 payload length
//   bytes 28..31 u32 reserved (0)

export const HEADER_SIZE = 32;
export const PROTOCOL_VERSION = 1;
export const ENC_PNG = 0;
export const ENC_RGBA8 = 1;

const MAGIC = [0x4f, 0x58, 0x46, 0x31]; // "OXF1"

export const OVERLAY_MODES = ["rgb", "overlay", "composite", "so2", "similarity"] as const;
export type OverlayMode = (typeof OVERLAY_MODES)[number];

export interface FrameHeader {
  version: number;
  encoding: number;
  frameId: number;
  width: number;
  height: number;
  payloadLen: number;
}

export function decodeFrameHeader(buf: ArrayBuffer, byteOffset = 0): FrameHeader {
  if (buf.byteLength - byteOffset < HEADER_SIZE) {
    throw new Error("stream frame shorter than header");
  }
  const view = new DataView(buf, byteOffset);
  for (let i = 0; i < 4; i++) {
    if (view.getUint8(i) !== MAGIC[i]) throw new Error("bad stream frame magic");
  }
  const frameId = view.getBigUint64(8, true);
  if (frameId > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new Error("frame id exceeds safe integer range");
  }
  return {
    version: view.getUint16(4, true),
    encoding: view.getUint16(6, true),
    frameId: Number(frameId),
    width: view.getUint32(16, true),
    height: view.getUint32(20, true),
    payloadLen: view.getUint32(24, true),
  };
}

export function encodeFrameHeader(h: FrameHeader): ArrayBuffer {
  const buf = new ArrayBuffer(HEADER_SIZE);
  const view = new DataView(buf);
  for (let i = 0; i < 4; i++) view.setUint8(i, MAGIC[i]!);
  view.setUint16(4, h.version, true);
  view.setUint16(6, h.encoding, true);
  view.setBigUint64(8, BigInt(h.frameId), true);
  view.setUint32(16, h.width, true);
  view.setUint32(20, h.height, true);
  view.setUint32(24, h.payloadLen, true);
  view.setUint32(28, 0, true);
  return buf;
}

// --- control messages (client -> server) -------------------------------------

export interface SceneRect {
  x: number;
  y: number;
  width: number;
  height: number;
}

export type ControlMessage =
  | { id: number; type: "set_roi"; x: number; y: number; width: number; height: number }
  | { id: number; type: "set_working_distance"; cm: number }
  | { id: number; type: "set_threshold"; rad: number }
  | { id: number; type: "set_colormap"; name: string; alpha?: number }
  | { id: number; type: "set_overlay_mode"; mode: OverlayMode }
  | { id: number; type: "pause" }
  | { id: number; type: "resume" }
  | { id: number; type: "select_source"; source: string }
  | { id: number; type: "request_stats" };

export const controls = {
  setRoi(id: number, rect: SceneRect): ControlMessage {
    return { id, type: "set_roi", x: rect.x, y: rect.y, width: rect.width, height: rect.height };
  },
  setWorkingDistance(id: number, cm: number): ControlMessage {
    return { id, type: "set_working_distance", cm };
  },
  setThreshold(id: number, rad: number): ControlMessage {
    return { id, type: "set_threshold", rad };
  },
  setColormap(id: number, name: string, alpha?: number): ControlMessage {
    return alpha === undefined
      ? { id, type: "set_colormap", name }
      : { id, type: "set_colormap", name, alpha };
  },
  setOverlayMode(id: number, mode: OverlayMode): ControlMessage {
    return { id, type: "set_overlay_mode", mode };
  },
  pause(id: number): ControlMessage {
    return { id, type: "pause" };
  },
  resume(id: number): ControlMessage {
    return { id, type: "resume" };
  },
  selectSource(id: number, source: string): ControlMessage {
    return { id, type: "select_source", source };
  },
  requestStats(id: number): ControlMessage {
    return { id, type: "request_stats" };
  },
};

// --- server documents (server -> client) -------------------------------------

export interface FrameMeta {
  type: "frame";
  frame_id: number;
  width: number;
  height: number;
  encoding: number;
  mode: OverlayMode;
  warnings: string[];
  uncalibrated: boolean;
  timings: Record<string, number>;
  so2_histogram: number[] | null;
  mean_so2: number | null;
}

export interface AckDoc {
  type: "ack";
  for_id: number | null;
  frame_id: number;
}

export interface NackDoc {
  type: "nack";
  for_id: number | null;
  reason: string;
}

export interface StatsDoc {
  type: "stats";
  counters: Record<string, number>;
  timing_medians_ms: Record<string, number>;
  config: { roi: SceneRect | null } & Record<string, unknown>;
  source: string;
  paused: boolean;
}

export interface EventDoc {
  type: "event";
  event: string;
  [key: string]: unknown;
}

export interface FrameErrorDoc {
  type: "frame_error";
  frame_id: number;
  error: string;
}

export type ServerDoc = FrameMeta | AckDoc | NackDoc | StatsDoc | EventDoc | FrameErrorDoc;

export function parseServerDoc(text: string): ServerDoc {
  const doc = JSON.parse(text);
  if (typeof doc !== "object" || doc === null || typeof doc.type !== "string") {
    throw new Error("malformed server document");
  }
  return doc as ServerDoc;
}
