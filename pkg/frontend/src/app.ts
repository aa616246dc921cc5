import { fetchTransport, ServiceClient } from "./client.js";
import { FrameDisplay, parseFrame } from "./frames.js";
import { overlayGeometry, type DrawList } from "./overlay.js";
import { DragHandleTool, layerAt, SimulateTool, SwapTool } from "./tools.js";
import type { GeometrySnapshot, Point } from "./types.js";
import { ViewState } from "./view.js";

/**
 * Wires the editor to a canvas: frame stream underneath, vector overlay on
 * top.  All geometry changes round-trip through the service; the only
 * client-side state is the camera and the optimistic drag preview.
 */
export class EditorApp {
  private geometry: GeometrySnapshot | null = null;
  private drawList: DrawList = { handles: [], curves: [], wireframe: [] };
  private frameBitmap: ImageBitmap | null = null;
  readonly frames = new FrameDisplay();
  readonly view: ViewState;
  readonly drag: DragHandleTool;
  readonly swap: SwapTool;
  readonly simulate: SimulateTool;
  showMesh = false;

  constructor(
    private readonly client: ServiceClient,
    private readonly canvas: HTMLCanvasElement,
  ) {
    this.view = new ViewState(client.info.width, client.info.height);
    this.drag = new DragHandleTool(client, this.view);
    this.swap = new SwapTool(client);
    this.simulate = new SimulateTool(client, this.view);
    this.frames.onDisplay((frame) => {
      this.view.latestFrameVersion = frame.version;
      this.swap.frameDisplayed(frame.version);
      void this.decodeAndPaint(frame.png);
    });
  }

  static async connect(
    baseUrl: string,
    docPath: string,
    canvas: HTMLCanvasElement,
  ): Promise<EditorApp> {
    const client = await ServiceClient.open(fetchTransport(baseUrl), docPath);
    const app = new EditorApp(client, canvas);
    await app.refreshGeometry();
    app.openFrameSocket(baseUrl);
    app.bindPointer();
    return app;
  }

  private openFrameSocket(baseUrl: string): void {
    const ws = new WebSocket(
      baseUrl.replace(/^http/, "ws") + this.client.framesPath(),
    );
    ws.binaryType = "arraybuffer";
    ws.onmessage = (ev: MessageEvent<ArrayBuffer>) => {
      this.frames.receive(parseFrame(ev.data));
    };
  }

  async refreshGeometry(): Promise<void> {
    this.geometry = await this.client.getGeometry();
    this.rebuildOverlay();
  }

  private rebuildOverlay(): void {
    if (this.geometry) {
      this.drawList = overlayGeometry(this.geometry, this.view, this.showMesh);
    }
    this.paint();
  }

  private async decodeAndPaint(png: Uint8Array): Promise<void> {
    const src = new Uint8Array(png); // copy onto a plain ArrayBuffer
    this.frameBitmap = await createImageBitmap(
      new Blob([src.buffer], { type: "image/png" }),
    );
    // a new frame means the server state moved on; re-pull the overlay
    if (this.geometry && this.frames.version > this.geometry.version) {
      void this.refreshGeometry();
    }
    this.paint();
  }

  private paint(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    if (this.frameBitmap) {
      ctx.save();
      ctx.translate(this.view.pan[0], this.view.pan[1]);
      ctx.scale(this.view.zoom, this.view.zoom);
      ctx.drawImage(this.frameBitmap, 0, 0);
      ctx.restore();
    }
    ctx.strokeStyle = "#18a0fb";
    for (const seg of this.drawList.curves) {
      const [p0, p1, p2, p3] = seg.controls;
      ctx.beginPath();
      ctx.moveTo(p0[0], p0[1]);
      ctx.bezierCurveTo(p1[0], p1[1], p2[0], p2[1], p3[0], p3[1]);
      ctx.stroke();
    }
    ctx.strokeStyle = "#9b9b9b";
    for (const e of this.drawList.wireframe) {
      ctx.beginPath();
      ctx.moveTo(e.a[0], e.a[1]);
      ctx.lineTo(e.b[0], e.b[1]);
      ctx.stroke();
    }
    ctx.fillStyle = "#ffffff";
    for (const h of this.drawList.handles) {
      const p =
        this.view.dragging &&
        this.view.dragging.layer === h.layer &&
        this.view.dragging.index === h.index &&
        this.drag.preview
          ? this.drag.preview
          : h.screen;
      ctx.beginPath();
      ctx.arc(p[0], p[1], 4, 0, 2 * Math.PI);
      ctx.fill();
      ctx.stroke();
    }
  }

  private bindPointer(): void {
    const screenOf = (ev: MouseEvent): Point => {
      const r = this.canvas.getBoundingClientRect();
      return [ev.clientX - r.left, ev.clientY - r.top];
    };
    this.canvas.addEventListener("pointerdown", (ev) => {
      const screen = screenOf(ev);
      switch (this.view.activeTool) {
        case "move-point":
          this.drag.press({ screen }, this.drawList.handles);
          break;
        case "swap-texture": {
          if (!this.geometry) break;
          const id = layerAt(this.geometry, this.view.screenToDoc(screen));
          if (id !== null) void this.swap.click(id).catch(() => {});
          break;
        }
        case "simulate":
          this.simulate.press({ screen });
          break;
        case "select": {
          if (!this.geometry) break;
          this.view.selectedLayer = layerAt(
            this.geometry,
            this.view.screenToDoc(screen),
          );
          this.rebuildOverlay();
          break;
        }
      }
      this.paint();
    });
    this.canvas.addEventListener("pointermove", (ev) => {
      const screen = screenOf(ev);
      this.drag.move({ screen });
      this.simulate.move({ screen });
      if (this.view.dragging) this.paint();
    });
    this.canvas.addEventListener("pointerup", () => {
      void this.drag.release().then(() => this.refreshGeometry());
      void this.simulate.release();
    });
    this.canvas.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      const screen = screenOf(ev);
      this.view.zoomAbout(ev.deltaY < 0 ? 1.25 : 0.8, screen);
      this.rebuildOverlay();
    });
  }
}
