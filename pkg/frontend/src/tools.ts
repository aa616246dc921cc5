import type { ServiceClient } from "./client.js";
import { hitTest, type Handle } from "./overlay.js";
import { Throttle } from "./throttle.js";
import type { GeometrySnapshot, Point } from "./types.js";
import type { ViewState } from "./view.js";

/** Upper bound on streamed interaction messages, per second. */
export const MAX_MESSAGES_PER_SEC = 30;

export interface PointerEvent2 {
  screen: Point;
}

/**
 * Control-point dragging: press picks a handle, moves stream throttled
 * `move_control_point` edits in document space, release sends one final
 * authoritative move.  The handle preview follows the pointer immediately;
 * the rendered image catches up when the next frame arrives.
 */
export class DragHandleTool {
  private active: Handle | null = null;
  private moved = false;
  private lastDocPos: Point | null = null;
  private readonly throttle: Throttle<Point>;
  /** Optimistic screen-space preview of the dragged handle. */
  preview: Point | null = null;

  constructor(
    private readonly client: ServiceClient,
    private readonly view: ViewState,
    now?: () => number,
  ) {
    this.throttle = new Throttle<Point>(
      MAX_MESSAGES_PER_SEC,
      (pos) => void this.sendMove(pos),
      now,
    );
  }

  private sendMove(pos: Point): Promise<number> {
    const h = this.active;
    if (!h) return Promise.resolve(this.client.version);
    return this.client.edit({
      kind: "move_control_point",
      layer: h.layer,
      index: h.index,
      pos,
    });
  }

  press(ev: PointerEvent2, handles: Handle[]): boolean {
    if (this.view.dragging) return false;
    const hit = hitTest(handles, ev.screen);
    if (!hit) return false;
    this.active = hit;
    this.moved = false;
    this.lastDocPos = null;
    this.preview = hit.screen;
    this.throttle.reset();
    this.view.dragging = { layer: hit.layer, index: hit.index };
    return true;
  }

  move(ev: PointerEvent2): void {
    if (!this.active) return;
    this.moved = true;
    this.preview = ev.screen;
    this.lastDocPos = this.view.screenToDoc(ev.screen);
    this.throttle.push(this.lastDocPos);
  }

  async release(): Promise<void> {
    const h = this.active;
    const final = this.moved ? this.lastDocPos : null;
    this.active = null;
    this.preview = null;
    this.view.dragging = null;
    this.throttle.reset(); // drop any pending intermediate move
    if (h && final) {
      // one authoritative move at the release position
      await this.client.edit({
        kind: "move_control_point",
        layer: h.layer,
        index: h.index,
        pos: final,
      });
    }
  }
}

export class SameLayerError extends Error {
  constructor() {
    super("source and target must be different foreground layers");
  }
}

/**
 * Texture swap: two clicks on distinct foreground layers emit exactly one
 * `swap_texture` edit.  The source→target arrow stays visible until a frame
 * at (or past) the acknowledged version arrives.
 */
export class SwapTool {
  private source: number | null = null;
  /** Arrow to draw, plus the version whose frame clears it. */
  arrow: { from: number; to: number; untilVersion: number } | null = null;

  constructor(private readonly client: ServiceClient) {}

  async click(layerId: number): Promise<void> {
    if (this.source === null) {
      this.source = layerId;
      return;
    }
    const from = this.source;
    this.source = null;
    if (from === layerId) throw new SameLayerError();
    const version = await this.client.edit({
      kind: "swap_texture",
      layer: from,
      other: layerId,
    });
    this.arrow = { from, to: layerId, untilVersion: version };
  }

  /** Call on every displayed frame; clears the arrow once it is stale. */
  frameDisplayed(version: number): void {
    if (this.arrow && version >= this.arrow.untilVersion) {
      this.arrow = null;
    }
  }

  reset(): void {
    this.source = null;
    this.arrow = null;
  }
}

/**
 * Physics steering: press sends one drag targeting the pointer, moves
 * stream throttled drag updates, release sends a single release message.
 */
export class SimulateTool {
  private down = false;
  private readonly throttle: Throttle<Point>;

  constructor(
    private readonly client: ServiceClient,
    private readonly view: ViewState,
    now?: () => number,
  ) {
    this.throttle = new Throttle<Point>(
      MAX_MESSAGES_PER_SEC,
      (doc) => void this.client.sim({ action: "drag", x: doc[0], y: doc[1] }),
      now,
    );
  }

  press(ev: PointerEvent2): void {
    if (this.down) return;
    this.down = true;
    this.throttle.reset();
    this.throttle.push(this.view.screenToDoc(ev.screen));
  }

  move(ev: PointerEvent2): void {
    if (!this.down) return;
    this.throttle.push(this.view.screenToDoc(ev.screen));
  }

  async release(): Promise<void> {
    if (!this.down) return;
    this.down = false;
    this.throttle.flush();
    await this.client.sim({ action: "release" });
  }
}

/** Pick the foreground layer whose bbox contains the document point. */
export function layerAt(
  geometry: GeometrySnapshot,
  doc: Point,
): number | null {
  for (let i = geometry.layers.length - 1; i >= 0; i--) {
    const layer = geometry.layers[i];
    if (layer.role !== "foreground") continue;
    const [[x0, y0], [x1, y1]] = layer.bbox as [Point, Point];
    if (doc[0] >= x0 && doc[0] <= x1 && doc[1] >= y0 && doc[1] <= y1) {
      return layer.id;
    }
  }
  return null;
}
