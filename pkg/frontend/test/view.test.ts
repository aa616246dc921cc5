import { describe, expect, it } from "vitest";

import { ViewState } from "../src/view.js";
import type { Point } from "../src/types.js";

describe("view transform", () => {
  it("rejects non-positive zoom", () => {
    expect(() => new ViewState(128, 128, 0)).toThrow(RangeError);
    expect(() => new ViewState(128, 128, -2)).toThrow(RangeError);
    const v = new ViewState(128, 128);
    expect(() => v.setZoom(0)).toThrow(RangeError);
  });

  it("screen to document round-trips within 0.5 px at any zoom", () => {
    const doc: Point[] = [
      [0, 0],
      [1, 1],
      [0.123, 0.987],
      [0.5, 0.25],
    ];
    for (const zoom of [0.1, 0.37, 1, 2, 5.5, 16, 64]) {
      const v = new ViewState(512, 384, zoom, [13.7, -42.1]);
      for (const p of doc) {
        const back = v.screenToDoc(v.docToScreen(p));
        // tolerance in screen pixels
        expect(
          Math.abs(back[0] - p[0]) * v.docWidth * zoom,
        ).toBeLessThanOrEqual(0.5);
        expect(
          Math.abs(back[1] - p[1]) * v.docHeight * zoom,
        ).toBeLessThanOrEqual(0.5);
        const fwd = v.docToScreen(v.screenToDoc(v.docToScreen(p)));
        const orig = v.docToScreen(p);
        expect(Math.hypot(fwd[0] - orig[0], fwd[1] - orig[1])).toBeLessThan(
          0.5,
        );
      }
    }
  });

  it("zoomAbout keeps the anchor point fixed", () => {
    const v = new ViewState(256, 256, 1, [10, 20]);
    const anchor: Point = [100, 80];
    const docAtAnchor = v.screenToDoc(anchor);
    v.zoomAbout(2.5, anchor);
    const after = v.docToScreen(docAtAnchor);
    expect(after[0]).toBeCloseTo(anchor[0], 6);
    expect(after[1]).toBeCloseTo(anchor[1], 6);
    expect(v.zoom).toBeCloseTo(2.5);
  });

  it("pan shifts screen coordinates without changing scale", () => {
    const v = new ViewState(128, 128, 3);
    const before = v.docToScreen([0.5, 0.5]);
    v.panBy(7, -4);
    const after = v.docToScreen([0.5, 0.5]);
    expect(after[0] - before[0]).toBeCloseTo(7);
    expect(after[1] - before[1]).toBeCloseTo(-4);
  });
});
