import type { Point } from "./types.js";

export type Tool =
  | "select"
  | "move-point"
  | "transform-layer"
  | "swap-texture"
  | "simulate";

/**
 * Camera + interaction state.  Document coordinates are normalized [0, 1]
 * over the document; screen mapping is
 * `screen = doc * docSize * zoom + pan` (pixels).
 */
export class ViewState {
  zoom: number;
  pan: Point;
  selectedLayer: number | null = null;
  activeTool: Tool = "select";
  latestFrameVersion = 0;
  /** At most one drag at a time; null when idle. */
  dragging: { layer: number; index: number } | null = null;

  constructor(
    public docWidth: number,
    public docHeight: number,
    zoom = 1,
    pan: Point = [0, 0],
  ) {
    if (!(zoom > 0)) throw new RangeError("zoom must be > 0");
    this.zoom = zoom;
    this.pan = [pan[0], pan[1]];
  }

  docToScreen(p: Point): Point {
    return [
      p[0] * this.docWidth * this.zoom + this.pan[0],
      p[1] * this.docHeight * this.zoom + this.pan[1],
    ];
  }

  screenToDoc(p: Point): Point {
    return [
      (p[0] - this.pan[0]) / (this.zoom * this.docWidth),
      (p[1] - this.pan[1]) / (this.zoom * this.docHeight),
    ];
  }

  setZoom(zoom: number): void {
    if (!(zoom > 0)) throw new RangeError("zoom must be > 0");
    this.zoom = zoom;
  }

  /** Zoom keeping the given screen point fixed. */
  zoomAbout(factor: number, anchor: Point): void {
    const next = this.zoom * factor;
    if (!(next > 0)) throw new RangeError("zoom must be > 0");
    this.pan = [
      anchor[0] - (anchor[0] - this.pan[0]) * factor,
      anchor[1] - (anchor[1] - this.pan[1]) * factor,
    ];
    this.zoom = next;
  }

  panBy(dx: number, dy: number): void {
    this.pan = [this.pan[0] + dx, this.pan[1] + dy];
  }
}
