// Client-side session state: latest frame, config echo, and in-flight
// control messages.  Pure state machine with no network or DOM dependencies
// so it can be driven directly from tests.

import {
  AckDoc,
  ControlMessage,
  FrameHeader,
  FrameMeta,
  NackDoc,
  ServerDoc,
  StatsDoc,
  decodeFrameHeader,
} from "./protocol.js";

export type ConnectionStatus = "connecting" | "open" | "closed";

export interface DisplayFrame {
  meta: FrameMeta;
  header: FrameHeader;
  payload: Uint8Array;
}

export interface ControlOutcome {
  ok: boolean;
  /** Frame id at which the change takes effect (ack only). */
  frameId?: number;
  /** Server-side failure reason (nack or connection loss). */
  reason?: string;
}

interface PendingControl {
  message: ControlMessage;
  resolve: (outcome: ControlOutcome) => void;
}

export class SessionState {
  connection: ConnectionStatus = "connecting";
  /** Highest frame id handed to the renderer; never decreases. */
  renderedFrameId = -1;
  /** Stats echo from the most recent stats document. */
  stats: StatsDoc | null = null;
  /** Wall-clock time of the last white-reference update event. */
  whiteUpdatedAt: number | null = null;
  lastError: string | null = null;

  private nextId = 1;
  private pending = new Map<number, PendingControl>();
  private awaitingPayload: FrameMeta | null = null;
  private latest: DisplayFrame | null = null;
  private now: () => number;

  constructor(now: () => number = Date.now) {
    this.now = now;
  }

  /** Allocate a control id; ids are unique within the session. */
  allocateId(): number {
    return this.nextId++;
  }

  /** Register a sent control; resolves on ack, nack, or connection loss. */
  track(message: ControlMessage): Promise<ControlOutcome> {
    return new Promise((resolve) => {
      this.pending.set(message.id, { message, resolve });
    });
  }

  pendingCount(): number {
    return this.pending.size;
  }

  handleText(text: string): ServerDoc {
    const doc = JSON.parse(text) as ServerDoc;
    switch (doc.type) {
      case "frame":
        this.awaitingPayload = doc;
        break;
      case "ack":
        this.resolvePending(doc);
        break;
      case "nack":
        this.resolvePending(doc);
        break;
      case "stats":
        this.stats = doc;
        break;
      case "event":
        if (doc.event === "white_reference_updated") {
          this.whiteUpdatedAt = this.now();
        }
        break;
      case "frame_error":
        this.lastError = doc.error;
        break;
    }
    return doc;
  }

  /**
   * Pair a binary payload with the metadata that preceded it.  Returns the
   * frame if it should be rendered, or null when it is stale (an id at or
   * below what is already on screen) or unannounced.
   */
  handleBinary(buf: ArrayBuffer): DisplayFrame | null {
    const header = decodeFrameHeader(buf);
    const meta = this.awaitingPayload;
    this.awaitingPayload = null;
    if (meta === null || meta.frame_id !== header.frameId) return null;
    if (header.frameId <= this.renderedFrameId) return null;
    const payload = new Uint8Array(buf, 32, header.payloadLen);
    this.latest = { meta, header, payload };
    return this.latest;
  }

  /** Newest-frame-wins: take the frame to draw and advance the watermark. */
  takeForRender(): DisplayFrame | null {
    const frame = this.latest;
    if (frame === null) return null;
    this.latest = null;
    this.renderedFrameId = frame.header.frameId;
    return frame;
  }

  /** Reference staleness: ms since the last white-reference update. */
  whiteReferenceAgeMs(): number | null {
    return this.whiteUpdatedAt === null ? null : this.now() - this.whiteUpdatedAt;
  }

  markOpen(): void {
    this.connection = "open";
  }

  /** Connection loss resolves every in-flight control as failed. */
  markClosed(): void {
    this.connection = "closed";
    this.awaitingPayload = null;
    const pending = [...this.pending.values()];
    this.pending.clear();
    for (const p of pending) {
      p.resolve({ ok: false, reason: "connection lost" });
    }
  }

  private resolvePending(doc: AckDoc | NackDoc): void {
    if (doc.for_id === null) return;
    const entry = this.pending.get(doc.for_id);
    if (entry === undefined) return;
    this.pending.delete(doc.for_id);
    if (doc.type === "ack") {
      entry.resolve({ ok: true, frameId: doc.frame_id });
    } else {
      entry.resolve({ ok: false, reason: doc.reason });
    }
  }
}
