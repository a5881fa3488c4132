// WebSocket transport for the console: connects to /stream, routes messages
// into a SessionState, resolves sent controls, and reconnects with backoff.
// The socket constructor is injectable so tests can use a Node client or a
// fake without a browser.

import { ControlMessage } from "./protocol.js";
import { ControlOutcome, SessionState } from "./session.js";

/** Minimal socket surface shared by browser WebSocket and the `ws` package. */
export interface SocketLike {
  binaryType: string;
  readyState: number;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  send(data: string): void;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientOptions {
  socketFactory?: SocketFactory;
  reconnectDelayMs?: number;
  onStatusChange?: (status: string) => void;
}

const OPEN = 1;

export class ConsoleClient {
  readonly session: SessionState;
  private socket: SocketLike | null = null;
  private stopped = false;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;
  private factory: SocketFactory;
  private reconnectDelayMs: number;
  private onStatusChange: (status: string) => void;

  constructor(private url: string, session?: SessionState, opts: ClientOptions = {}) {
    this.session = session ?? new SessionState();
    this.factory = opts.socketFactory ?? ((u) => new WebSocket(u) as unknown as SocketLike);
    this.reconnectDelayMs = opts.reconnectDelayMs ?? 1000;
    this.onStatusChange = opts.onStatusChange ?? (() => {});
  }

  connect(): void {
    this.stopped = false;
    this.session.connection = "connecting";
    this.onStatusChange("connecting");
    const ws = this.factory(this.url);
    ws.binaryType = "arraybuffer";
    ws.onopen = () => {
      this.session.markOpen();
      this.onStatusChange("connected");
    };
    ws.onmessage = (ev) => this.route(ev.data);
    ws.onerror = () => {};
    ws.onclose = () => {
      this.session.markClosed();
      this.onStatusChange("disconnected");
      this.socket = null;
      if (!this.stopped) {
        this.reconnectTimer = setTimeout(() => this.connect(), this.reconnectDelayMs);
      }
    };
    this.socket = ws;
  }

  close(): void {
    this.stopped = true;
    if (this.reconnectTimer !== null) clearTimeout(this.reconnectTimer);
    this.socket?.close();
  }

  /** Send a control message; resolves when the server acks or nacks it. */
  send(message: ControlMessage): Promise<ControlOutcome> {
    if (this.socket === null || this.socket.readyState !== OPEN) {
      return Promise.resolve({ ok: false, reason: "not connected" });
    }
    const outcome = this.session.track(message);
    this.socket.send(JSON.stringify(message));
    return outcome;
  }

  private route(data: unknown): void {
    if (typeof data === "string") {
      this.session.handleText(data);
    } else if (data instanceof ArrayBuffer) {
      this.session.handleBinary(data);
    } else if (ArrayBuffer.isView(data as ArrayBufferView)) {
      const v = data as ArrayBufferView;
      const copy = new Uint8Array(v.byteLength);
      copy.set(new Uint8Array(v.buffer, v.byteOffset, v.byteLength));
      this.session.handleBinary(copy.buffer);
    }
  }
}
