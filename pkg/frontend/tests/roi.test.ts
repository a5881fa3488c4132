import { describe, expect, it } from "vitest";

import {
  MIN_DRAG_AREA_PX,
  RoiDrag,
  canvasToScene,
  fitTransform,
  sceneRectToCanvas,
  sceneToCanvas,
} from "../src/roi.js";

describe("view transform", () => {
  it("letterboxes a wide scene into a square canvas", () => {
    const t = fitTransform(800, 800, 400, 200);
    expect(t.scale).toBe(2);
    expect(t.offsetX).toBe(0);
    expect(t.offsetY).toBe(200);
  });

  it("round-trips points through canvas and scene coordinates", () => {
    const t = fitTransform(820, 640, 290, 275);
    for (const [x, y] of [[0, 0], [289, 274], [120.5, 33.25]]) {
      const c = sceneToCanvas(t, x!, y!);
      const s = canvasToScene(t, c.x, c.y);
      expect(s.x).toBeCloseTo(x!, 9);
      expect(s.y).toBeCloseTo(y!, 9);
    }
  });
});

describe("roi drag", () => {
  it("maps a drag on a scaled canvas to scene pixels within 1 px", () => {
    const t = fitTransform(870, 825, 290, 275); // 3x scale
    const drag = new RoiDrag(t, 290, 275);
    const a = sceneToCanvas(t, 3, 3);
    const b = sceneToCanvas(t, 59, 56);
    drag.begin(a.x, a.y);
    drag.update(b.x, b.y);
    const result = drag.finish();
    expect(result.kind).toBe("roi");
    if (result.kind !== "roi") return;
    expect(Math.abs(result.rect.x - 3)).toBeLessThanOrEqual(1);
    expect(Math.abs(result.rect.y - 3)).toBeLessThanOrEqual(1);
    expect(Math.abs(result.rect.x + result.rect.width - 59)).toBeLessThanOrEqual(1);
    expect(Math.abs(result.rect.y + result.rect.height - 56)).toBeLessThanOrEqual(1);

    // server echo redrawn on the canvas coincides with the original drag
    const echo = sceneRectToCanvas(t, result.rect);
    expect(Math.abs(echo.x - a.x)).toBeLessThanOrEqual(t.scale);
    expect(Math.abs(echo.y - a.y)).toBeLessThanOrEqual(t.scale);
  });

  it("handles drags in any direction", () => {
    const t = fitTransform(290, 275, 290, 275);
    const drag = new RoiDrag(t, 290, 275);
    drag.begin(50, 60);
    drag.update(10, 20);
    const result = drag.finish();
    expect(result).toEqual({ kind: "roi", rect: { x: 10, y: 20, width: 40, height: 40 } });
  });

  it("blocks sub-minimum drags with a hint", () => {
    const t = fitTransform(290, 275, 290, 275);
    const drag = new RoiDrag(t, 290, 275);
    drag.begin(10, 10);
    drag.update(13, 13); // 9 px² < MIN_DRAG_AREA_PX
    const result = drag.finish();
    expect(result.kind).toBe("too-small");
    if (result.kind === "too-small") {
      expect(result.hint).toContain(String(MIN_DRAG_AREA_PX));
    }
  });

  it("clamps rectangles to the scene bounds", () => {
    const t = fitTransform(290, 275, 290, 275);
    const drag = new RoiDrag(t, 290, 275);
    drag.begin(-20, -30);
    drag.update(400, 500);
    const result = drag.finish();
    expect(result).toEqual({ kind: "roi", rect: { x: 0, y: 0, width: 290, height: 275 } });
  });
});
