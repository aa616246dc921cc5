import type {
  EditRequest,
  GeometrySnapshot,
  SessionInfo,
  SimRequest,
} from "./types.js";

/**
 * Minimal JSON transport the client needs; satisfied by `fetch` in the
 * browser and by the in-process mock in tests.
 */
export interface Transport {
  post(path: string, body: unknown): Promise<unknown>;
  get(path: string): Promise<unknown>;
}

export class ServiceError extends Error {
  constructor(
    public readonly status: number,
    detail: string,
  ) {
    super(detail);
  }
}

export function fetchTransport(baseUrl: string): Transport {
  const call = async (path: string, init?: RequestInit) => {
    const res = await fetch(baseUrl + path, init);
    const body = await res.json().catch(() => ({}));
    if (!res.ok) {
      const detail =
        typeof body === "object" && body !== null && "detail" in body
          ? String((body as { detail: unknown }).detail)
          : res.statusText;
      throw new ServiceError(res.status, detail);
    }
    return body;
  };
  return {
    get: (path) => call(path),
    post: (path, body) =>
      call(path, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      }),
  };
}

/** Control-plane client for one editing session. */
export class ServiceClient {
  private constructor(
    private readonly transport: Transport,
    public readonly info: SessionInfo,
  ) {}

  /** Last version token acknowledged by the service. */
  version: number = 0;

  static async open(
    transport: Transport,
    docPath: string,
  ): Promise<ServiceClient> {
    const info = (await transport.post("/session", {
      doc: docPath,
    })) as SessionInfo;
    const client = new ServiceClient(transport, info);
    client.version = info.version;
    return client;
  }

  private get base(): string {
    return `/session/${this.info.session}`;
  }

  async getGeometry(): Promise<GeometrySnapshot> {
    const snap = (await this.transport.get(
      `${this.base}/geometry`,
    )) as GeometrySnapshot;
    this.version = snap.version;
    return snap;
  }

  async edit(req: EditRequest): Promise<number> {
    const res = (await this.transport.post(`${this.base}/edit`, req)) as {
      version: number;
    };
    this.version = res.version;
    return res.version;
  }

  async undo(): Promise<number> {
    const res = (await this.transport.post(`${this.base}/undo`, {})) as {
      version: number;
    };
    this.version = res.version;
    return res.version;
  }

  async sim(req: SimRequest): Promise<unknown> {
    return this.transport.post(`${this.base}/sim`, req);
  }

  framesPath(): string {
    return `${this.base}/frames`;
  }
}
