import type { GeometrySnapshot, Point } from "./types.js";
import type { ViewState } from "./view.js";

/** Screen-space hit radius for control-point handles, in pixels. */
export const HIT_RADIUS = 8;

export interface Handle {
  layer: number;
  index: number;
  screen: Point;
}

export interface CurveSegment {
  layer: number;
  /** Four screen-space cubic Bézier controls. */
  controls: [Point, Point, Point, Point];
}

export interface WireEdge {
  a: Point;
  b: Point;
}

export interface DrawList {
  handles: Handle[];
  curves: CurveSegment[];
  /** Level-1 mesh wireframe of the selected layer (empty when toggled off). */
  wireframe: WireEdge[];
}

/**
 * Project a geometry snapshot through the view into screen-space
 * primitives.  Only foreground layers get draggable handles; the mesh
 * wireframe covers the selected layer when `showMesh` is set.
 */
export function overlayGeometry(
  geometry: GeometrySnapshot,
  view: ViewState,
  showMesh = false,
): DrawList {
  const handles: Handle[] = [];
  const curves: CurveSegment[] = [];
  const wireframe: WireEdge[] = [];

  for (const layer of geometry.layers) {
    if (layer.role !== "foreground") continue;
    const pts = layer.control_points.map((p) => view.docToScreen(p));
    pts.forEach((screen, index) => {
      handles.push({ layer: layer.id, index, screen });
    });
    const m = Math.floor(pts.length / 3);
    for (let j = 0; j < m; j++) {
      curves.push({
        layer: layer.id,
        controls: [
          pts[3 * j],
          pts[3 * j + 1],
          pts[3 * j + 2],
          pts[(3 * j + 3) % pts.length],
        ],
      });
    }
    if (showMesh && layer.id === view.selectedLayer) {
      const verts = layer.mesh_level1_vertices.map((p) => view.docToScreen(p));
      const seen = new Set<string>();
      for (const [a, b, c] of layer.mesh_level1_triangles) {
        for (const [u, v] of [
          [a, b],
          [b, c],
          [c, a],
        ] as const) {
          const key = u < v ? `${u}-${v}` : `${v}-${u}`;
          if (seen.has(key)) continue;
          seen.add(key);
          wireframe.push({ a: verts[u], b: verts[v] });
        }
      }
    }
  }
  return { handles, curves, wireframe };
}

/** Nearest handle within HIT_RADIUS of a screen point, or null. */
export function hitTest(handles: Handle[], screen: Point): Handle | null {
  let best: Handle | null = null;
  let bestD2 = HIT_RADIUS * HIT_RADIUS;
  for (const h of handles) {
    const dx = h.screen[0] - screen[0];
    const dy = h.screen[1] - screen[1];
    const d2 = dx * dx + dy * dy;
    if (d2 <= bestD2) {
      best = h;
      bestD2 = d2;
    }
  }
  return best;
}
