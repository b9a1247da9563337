/** Typed client for the session service REST API. */

export type Polarity = "positive" | "negative";

export interface ClickInfo {
  row: number;
  col: number;
  polarity: string;
  ordinal: number;
}

export interface PropagationInfo {
  status: string;
  seeds: number[];
  provenance: Record<string, number>;
}

export interface SessionSummary {
  session_id: string;
  kind: "image" | "volume";
  depth: number;
  height: number;
  width: number;
  active_slice: number;
  clicks: Record<string, ClickInfo[]>;
  mask_versions: Record<string, number>;
  propagation: PropagationInfo | null;
  created_at: string;
  updated_at: string;
  weights_ref: string;
}

export interface MaskFetch {
  bytes: Uint8Array;
  version: number;
}

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function orThrow(resp: Response): Promise<Response> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail);
  }
  return resp;
}

export class SessionApi {
  constructor(private base: string) {}

  async createImageSession(pngB64: string): Promise<string> {
    const resp = await orThrow(await fetch(`${this.base}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ image_png_b64: pngB64 }),
    }));
    return (await resp.json()).session_id as string;
  }

  async createRawVolumeSession(rawB64: string, depth: number, height: number,
                               width: number): Promise<string> {
    const resp = await orThrow(await fetch(`${this.base}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        volume: { raw_b64: rawB64, depth, height, width },
      }),
    }));
    return (await resp.json()).session_id as string;
  }

  async addClick(sessionId: string, slice: number, row: number, col: number,
                 polarity: Polarity): Promise<number> {
    const resp = await orThrow(
      await fetch(`${this.base}/sessions/${sessionId}/clicks`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ slice, row, col, polarity }),
      }));
    return (await resp.json()).mask_version as number;
  }

  async undoLast(sessionId: string, slice: number): Promise<number> {
    const resp = await orThrow(await fetch(
      `${this.base}/sessions/${sessionId}/clicks/last?slice=${slice}`,
      { method: "DELETE" }));
    return (await resp.json()).mask_version as number;
  }

  async fetchMask(sessionId: string, slice: number,
                  version?: number): Promise<MaskFetch> {
    const q = version === undefined ? "" : `&version=${version}`;
    const resp = await orThrow(await fetch(
      `${this.base}/sessions/${sessionId}/mask?slice=${slice}${q}`));
    const bytes = new Uint8Array(await resp.arrayBuffer());
    const etag = resp.headers.get("ETag") ?? "-1";
    return { bytes, version: parseInt(etag, 10) };
  }

  async propagate(sessionId: string, seedSlices?: number[]):
      Promise<PropagationInfo> {
    const resp = await orThrow(await fetch(
      `${this.base}/sessions/${sessionId}/propagate`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(seedSlices ? { seed_slices: seedSlices } : {}),
      }));
    const body = await resp.json();
    return { status: body.job_status, seeds: seedSlices ?? [],
             provenance: body.provenance };
  }

  async getSession(sessionId: string): Promise<SessionSummary> {
    const resp = await orThrow(
      await fetch(`${this.base}/sessions/${sessionId}`));
    return await resp.json() as SessionSummary;
  }

  async health(): Promise<boolean> {
    try {
      const resp = await fetch(`${this.base}/healthz`);
      return resp.ok;
    } catch {
      return false;
    }
  }
}
