/** Client for the tunable-restoration service. */

export interface RestoreResponse {
  bytes: ArrayBuffer;
  /** Alpha the server actually used, echoed in the X-Alpha header. */
  echoedAlpha: number;
}

export interface DegradationMap {
  n: number;
  s_f: number[][];
  s_i: number[][];
}

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class TunerApi {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async uploadImage(png: Blob | ArrayBuffer): Promise<string> {
    const resp = await this.fetchImpl(`${this.baseUrl}/images`, {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: png as BodyInit,
    });
    if (!resp.ok) {
      throw new ApiError(`upload failed (${resp.status})`, resp.status);
    }
    const payload = (await resp.json()) as { image_id: string };
    return payload.image_id;
  }

  restoreUrl(imageId: string, alpha: number): string {
    return `${this.baseUrl}/images/${imageId}/restore?alpha=${alpha}`;
  }

  async restore(imageId: string, alpha: number, signal?: AbortSignal): Promise<RestoreResponse> {
    const resp = await this.fetchImpl(this.restoreUrl(imageId, alpha), { signal });
    if (!resp.ok) {
      throw new ApiError(`restore failed (${resp.status})`, resp.status);
    }
    const echoed = resp.headers.get("X-Alpha");
    return {
      bytes: await resp.arrayBuffer(),
      echoedAlpha: echoed === null ? Number.NaN : Number.parseFloat(echoed),
    };
  }

  async degradation(imageId: string): Promise<DegradationMap> {
    const resp = await this.fetchImpl(`${this.baseUrl}/images/${imageId}/degradation`);
    if (!resp.ok) {
      throw new ApiError(`degradation fetch failed (${resp.status})`, resp.status);
    }
    return (await resp.json()) as DegradationMap;
  }
}
