/** Wire shapes exchanged with the local editing service. */

export type Point = [number, number];

/** One layer's geometry snapshot; coordinates are normalized to [0, 1]. */
export interface LayerGeometry {
  id: number;
  role: "foreground" | "background";
  /** Closed cubic Bézier loop: 3m control points. */
  control_points: Point[];
  bbox: [Point, Point] | number[][];
  mesh_level1_vertices: Point[];
  mesh_level1_triangles: [number, number, number][];
}

export interface GeometrySnapshot {
  version: number;
  layers: LayerGeometry[];
}

export interface SessionInfo {
  session: string;
  version: number;
  width: number;
  height: number;
}

export type EditRequest =
  | {
      kind: "move_control_point";
      layer: number;
      index: number;
      pos: Point;
    }
  | {
      kind: "swap_texture";
      layer: number;
      other: number;
    };

export type SimRequest =
  | { action: "start"; layer: number; gravity?: Point }
  | { action: "stop" }
  | { action: "drag"; x: number; y: number }
  | { action: "release" }
  | { action: "pin"; x: number; y: number };

/** Decoded binary frame: 16-byte header (version u64, w u32, h u32) + PNG. */
export interface Frame {
  version: number;
  width: number;
  height: number;
  png: Uint8Array;
}
