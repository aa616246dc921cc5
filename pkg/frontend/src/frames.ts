import type { Frame } from "./types.js";

export const FRAME_HEADER_BYTES = 16;

/**
 * Decode one binary frame message: little-endian u64 version, u32 width,
 * u32 height, then the PNG payload.
 */
export function parseFrame(buf: ArrayBuffer | Uint8Array): Frame {
  const bytes = buf instanceof Uint8Array ? buf : new Uint8Array(buf);
  if (bytes.byteLength < FRAME_HEADER_BYTES) {
    throw new RangeError(
      `frame shorter than ${FRAME_HEADER_BYTES}-byte header`,
    );
  }
  const dv = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const version = Number(dv.getBigUint64(0, true));
  const width = dv.getUint32(8, true);
  const height = dv.getUint32(12, true);
  return {
    version,
    width,
    height,
    png: bytes.subarray(FRAME_HEADER_BYTES),
  };
}

export function encodeFrame(frame: Frame): Uint8Array {
  const out = new Uint8Array(FRAME_HEADER_BYTES + frame.png.byteLength);
  const dv = new DataView(out.buffer);
  dv.setBigUint64(0, BigInt(frame.version), true);
  dv.setUint32(8, frame.width, true);
  dv.setUint32(12, frame.height, true);
  out.set(frame.png, FRAME_HEADER_BYTES);
  return out;
}

/**
 * Keeps the newest frame by version token; late (out-of-order) frames are
 * dropped so the displayed image is monotone in version.
 */
export class FrameDisplay {
  private latest: Frame | null = null;
  private readonly listeners: ((frame: Frame) => void)[] = [];

  get current(): Frame | null {
    return this.latest;
  }

  get version(): number {
    return this.latest ? this.latest.version : -1;
  }

  onDisplay(fn: (frame: Frame) => void): void {
    this.listeners.push(fn);
  }

  /** Returns true when the frame was displayed, false when dropped. */
  receive(frame: Frame): boolean {
    if (this.latest !== null && frame.version < this.latest.version) {
      return false;
    }
    this.latest = frame;
    for (const fn of this.listeners) fn(frame);
    return true;
  }
}
