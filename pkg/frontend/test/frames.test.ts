import { describe, expect, it } from "vitest";

import {
  FRAME_HEADER_BYTES,
  FrameDisplay,
  encodeFrame,
  parseFrame,
} from "../src/frames.js";

const png = (fill: number) => new Uint8Array(32).fill(fill);

describe("frame wire format", () => {
  it("round-trips header and payload", () => {
    const f = { version: 12345678901, width: 640, height: 480, png: png(7) };
    const decoded = parseFrame(encodeFrame(f));
    expect(decoded.version).toBe(f.version);
    expect(decoded.width).toBe(640);
    expect(decoded.height).toBe(480);
    expect([...decoded.png]).toEqual([...f.png]);
  });

  it("rejects truncated headers", () => {
    expect(() =>
      parseFrame(new Uint8Array(FRAME_HEADER_BYTES - 1)),
    ).toThrow(RangeError);
  });
});

describe("frame display ordering", () => {
  it("is monotone in version: late frames are dropped", () => {
    const display = new FrameDisplay();
    const shown: number[] = [];
    display.onDisplay((f) => shown.push(f.version));
    const mk = (v: number) => ({ version: v, width: 8, height: 8, png: png(v) });
    expect(display.receive(mk(1))).toBe(true);
    expect(display.receive(mk(3))).toBe(true);
    expect(display.receive(mk(2))).toBe(false); // out-of-order injection
    expect(display.receive(mk(3))).toBe(true); // re-render at same version ok
    expect(display.receive(mk(5))).toBe(true);
    expect(shown).toEqual([1, 3, 3, 5]);
    expect(display.version).toBe(5);
    for (let i = 1; i < shown.length; i++) {
      expect(shown[i]).toBeGreaterThanOrEqual(shown[i - 1]);
    }
  });

  it("starts empty", () => {
    const display = new FrameDisplay();
    expect(display.current).toBeNull();
    expect(display.version).toBe(-1);
  });
});
