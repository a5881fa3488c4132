// Region-of-interest selection: mapping between canvas pixels and scene
// pixels, and the click-drag rectangle state machine.  The server only ever
// sees scene coordinates; all scaling is undone client-side.

import { SceneRect } from "./protocol.js";

/** Minimum drag rectangle area, in canvas pixels. */
export const MIN_DRAG_AREA_PX = 16;

export interface ViewTransform {
  scale: number;
  offsetX: number;
  offsetY: number;
}

/** Letterbox fit of a scene into a canvas, preserving aspect ratio. */
export function fitTransform(
  canvasWidth: number,
  canvasHeight: number,
  sceneWidth: number,
  sceneHeight: number,
): ViewTransform {
  const scale = Math.min(canvasWidth / sceneWidth, canvasHeight / sceneHeight);
  return {
    scale,
    offsetX: (canvasWidth - sceneWidth * scale) / 2,
    offsetY: (canvasHeight - sceneHeight * scale) / 2,
  };
}

export function canvasToScene(t: ViewTransform, x: number, y: number): { x: number; y: number } {
  return { x: (x - t.offsetX) / t.scale, y: (y - t.offsetY) / t.scale };
}

export function sceneToCanvas(t: ViewTransform, x: number, y: number): { x: number; y: number } {
  return { x: x * t.scale + t.offsetX, y: y * t.scale + t.offsetY };
}

/** Scene rectangle drawn back onto the canvas (for the server roi echo). */
export function sceneRectToCanvas(
  t: ViewTransform,
  rect: SceneRect,
): { x: number; y: number; width: number; height: number } {
  const a = sceneToCanvas(t, rect.x, rect.y);
  return { x: a.x, y: a.y, width: rect.width * t.scale, height: rect.height * t.scale };
}

export type DragResult =
  | { kind: "roi"; rect: SceneRect }
  | { kind: "too-small"; hint: string };

/**
 * Click-drag rectangle in canvas coordinates; `finish` converts to integer
 * scene coordinates clamped to the scene bounds.
 */
export class RoiDrag {
  private startX = 0;
  private startY = 0;
  private curX = 0;
  private curY = 0;
  private dragging = false;

  constructor(
    private transform: ViewTransform,
    private sceneWidth: number,
    private sceneHeight: number,
  ) {}

  begin(canvasX: number, canvasY: number): void {
    this.startX = canvasX;
    this.startY = canvasY;
    this.curX = canvasX;
    this.curY = canvasY;
    this.dragging = true;
  }

  update(canvasX: number, canvasY: number): void {
    if (!this.dragging) return;
    this.curX = canvasX;
    this.curY = canvasY;
  }

  /** Current rectangle in canvas coordinates, for rubber-band drawing. */
  canvasRect(): { x: number; y: number; width: number; height: number } {
    return {
      x: Math.min(this.startX, this.curX),
      y: Math.min(this.startY, this.curY),
      width: Math.abs(this.curX - this.startX),
      height: Math.abs(this.curY - this.startY),
    };
  }

  finish(): DragResult {
    this.dragging = false;
    const r = this.canvasRect();
    if (r.width * r.height < MIN_DRAG_AREA_PX) {
      return {
        kind: "too-small",
        hint: `drag a rectangle of at least ${MIN_DRAG_AREA_PX} canvas pixels`,
      };
    }
    const a = canvasToScene(this.transform, r.x, r.y);
    const b = canvasToScene(this.transform, r.x + r.width, r.y + r.height);
    const x0 = Math.max(0, Math.min(this.sceneWidth - 1, Math.round(a.x)));
    const y0 = Math.max(0, Math.min(this.sceneHeight - 1, Math.round(a.y)));
    const x1 = Math.max(x0 + 1, Math.min(this.sceneWidth, Math.round(b.x)));
    const y1 = Math.max(y0 + 1, Math.min(this.sceneHeight, Math.round(b.y)));
    return { kind: "roi", rect: { x: x0, y: y0, width: x1 - x0, height: y1 - y0 } };
  }
}
