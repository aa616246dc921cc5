import { describe, expect, it } from "vitest";

import { ServiceClient } from "../src/client.js";
import { overlayGeometry } from "../src/overlay.js";
import { DragHandleTool } from "../src/tools.js";
import type { Point } from "../src/types.js";
import { ViewState } from "../src/view.js";
import { FakeClock, MockService } from "./mock.js";

async function setup(zoom = 1) {
  const svc = new MockService();
  const client = await ServiceClient.open(svc, "/doc.pimg");
  const view = new ViewState(svc.width, svc.height, zoom);
  const clock = new FakeClock();
  const tool = new DragHandleTool(client, view, clock.now);
  const handles = overlayGeometry(svc.geometry, view).handles;
  svc.requests.length = 0;
  return { svc, client, view, clock, tool, handles };
}

describe("control-point dragging", () => {
  it("press on a handle starts a drag; elsewhere does not", async () => {
    const { view, tool, handles } = await setup();
    expect(tool.press({ screen: [-50, -50] }, handles)).toBe(false);
    expect(view.dragging).toBeNull();
    expect(tool.press({ screen: handles[0].screen }, handles)).toBe(true);
    expect(view.dragging).toEqual({
      layer: handles[0].layer,
      index: handles[0].index,
    });
  });

  it("release without movement sends zero move requests", async () => {
    const { svc, tool, handles } = await setup();
    tool.press({ screen: handles[0].screen }, handles);
    await tool.release();
    expect(svc.ofKind("/edit").length).toBe(0);
  });

  it("50 move events over 200 ms stay within the 30/s budget", async () => {
    const { svc, clock, tool, handles } = await setup();
    tool.press({ screen: handles[0].screen }, handles);
    const durationMs = 200;
    const n = 50;
    for (let i = 0; i < n; i++) {
      clock.advance(durationMs / n);
      tool.move({
        screen: [handles[0].screen[0] + i, handles[0].screen[1] + i],
      });
    }
    await tool.release();
    const moves = svc.ofKind("/edit");
    const budget = Math.ceil((durationMs / 1000) * 30) + 1;
    expect(moves.length).toBeLessThanOrEqual(budget);
    expect(moves.length).toBeGreaterThan(0);
  });

  it("release emits one authoritative move at the final position", async () => {
    const { svc, view, clock, tool, handles } = await setup(2);
    const h = handles[3];
    tool.press({ screen: h.screen }, handles);
    const finalScreen: Point = [h.screen[0] + 17, h.screen[1] - 9];
    clock.advance(100);
    tool.move({ screen: [h.screen[0] + 5, h.screen[1] + 5] });
    tool.move({ screen: finalScreen }); // throttled away
    await tool.release();
    const moves = svc.ofKind("/edit");
    const last = moves[moves.length - 1].body as {
      kind: string;
      layer: number;
      index: number;
      pos: Point;
    };
    expect(last.kind).toBe("move_control_point");
    expect(last.layer).toBe(h.layer);
    expect(last.index).toBe(h.index);
    const expected = view.screenToDoc(finalScreen);
    expect(last.pos[0]).toBeCloseTo(expected[0], 9);
    expect(last.pos[1]).toBeCloseTo(expected[1], 9);
  });

  it("emitted coordinates are document-space at any zoom", async () => {
    for (const zoom of [0.5, 1, 3, 8]) {
      const { svc, view, clock, tool, handles } = await setup(zoom);
      const h = handles[0];
      tool.press({ screen: h.screen }, handles);
      clock.advance(1000);
      const target: Point = [h.screen[0] + 40, h.screen[1] + 24];
      tool.move({ screen: target });
      await tool.release();
      const moves = svc.ofKind("/edit");
      const body = moves[moves.length - 1].body as { pos: Point };
      const roundTrip = view.docToScreen(body.pos);
      expect(Math.hypot(roundTrip[0] - target[0], roundTrip[1] - target[1]))
        .toBeLessThanOrEqual(0.5);
    }
  });

  it("only one drag can be active at a time", async () => {
    const { view, tool, handles } = await setup();
    expect(tool.press({ screen: handles[0].screen }, handles)).toBe(true);
    expect(tool.press({ screen: handles[1].screen }, handles)).toBe(false);
    expect(view.dragging).toEqual({
      layer: handles[0].layer,
      index: handles[0].index,
    });
  });

  it("the drag preview follows the pointer before any frame arrives", async () => {
    const { tool, handles } = await setup();
    tool.press({ screen: handles[0].screen }, handles);
    tool.move({ screen: [99, 77] });
    expect(tool.preview).toEqual([99, 77]);
    await tool.release();
    expect(tool.preview).toBeNull();
  });
});
