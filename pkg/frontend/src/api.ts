/** Typed access to the telemetry server's JSON routes. */

export interface SchemaInfo {
  steps: number;
  obs_dim: number[];
  obs_type: string;
  action_dim: number[];
  action_type: string;
  reward_dim: number;
  reward_type: string;
  has_frames: boolean;
}

export interface Metrics {
  episode_count: number;
  complete_count: number;
  step_count: number;
  average_return: number | null;
  average_duration_s: number | null;
  average_length: number | null;
  schema: SchemaInfo | null;
  manifest_version: number;
}

export interface Episode {
  id: number;
  n_steps: number;
  complete: boolean;
  return_sum: number;
  duration_s: number;
  has_frames: boolean;
  dones: boolean[];
  scalar_rewards: number[];
  state_series: number[][];
  state_dim_count: number;
  state_series_truncated: boolean;
  action_series: number[][];
  action_dim_count: number;
  action_series_truncated: boolean;
  reward_series: number[][];
  reward_dim_count: number;
  reward_series_truncated: boolean;
}

export interface StepTuple {
  episode_id: number;
  t: number;
  s: unknown;
  a: unknown;
  r: number[];
  s_next: unknown | null;
  done: boolean;
  has_frame: boolean;
}

export interface ProjectionParams {
  window?: number;
  max_points?: number;
  perplexity?: number;
  seed?: number;
}

export interface Projection {
  status: "done";
  n: number;
  points: [number, number][];
  refs: [number, number][];
  kl: number;
  params: Record<string, number>;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

const sleep = (ms: number) => new Promise<void>((res) => setTimeout(res, ms));

export class Api {
  constructor(private readonly base: string = "") {}

  metrics(): Promise<Metrics> {
    return this.json("/api/metrics");
  }

  episode(id: number): Promise<Episode> {
    return this.json(`/api/episodes/${id}`);
  }

  step(id: number, t: number): Promise<StepTuple> {
    return this.json(`/api/episodes/${id}/frames/${t}`);
  }

  frameImageUrl(id: number, t: number): string {
    return `${this.base}/api/episodes/${id}/frames/${t}/image`;
  }

  /**
   * Request a 2-D embedding. A 409 means the server is computing;
   * the identical URL is polled until it answers 200. A finished job
   * stays cached server-side, so a repeat resolves on the first fetch.
   */
  async projection(
    params: ProjectionParams,
    onProgress?: (p: number) => void,
    pollMs = 500,
  ): Promise<Projection> {
    const q = new URLSearchParams();
    for (const [k, v] of Object.entries(params)) {
      if (v !== undefined) q.set(k, String(v));
    }
    const query = q.toString();
    const url = `/api/projection${query ? `?${query}` : ""}`;
    for (;;) {
      const r = await fetch(this.base + url);
      const body = (await r.json()) as Record<string, unknown>;
      if (r.status === 200) return body as unknown as Projection;
      if (r.status === 409) {
        onProgress?.(typeof body.progress === "number" ? body.progress : 0);
        await sleep(pollMs);
        continue;
      }
      throw new ApiError(r.status, String(body.error ?? r.statusText));
    }
  }

  private async json<T>(path: string): Promise<T> {
    const r = await fetch(this.base + path);
    const body = (await r.json().catch(() => ({}))) as Record<string, unknown>;
    if (!r.ok) throw new ApiError(r.status, String(body.error ?? r.statusText));
    return body as T;
  }
}
