/** Typed HTTP client for the session service. All traffic goes through
 * these endpoints; the UI never touches files or session internals. */

export interface ActionStep {
  action: string;
  repeat: number;
}

export interface SessionHandle {
  id: string;
  created_at: number;
  status: "ready" | "stepping" | "error";
  scene_seed: number;
  config: SessionConfig;
}

export interface SessionConfig {
  K: number;
  D: number;
  segment_length: number;
  intrinsics: {
    fx: number;
    fy: number;
    cx: number;
    cy: number;
    width: number;
    height: number;
  };
  [key: string]: unknown;
}

export interface ChunkTrace {
  index: number;
  frame_range: [number, number];
  selected: number[];
  sources: string[];
  gains: number[];
  termination: string;
  coverage_fraction: number;
}

export interface SegmentTrace {
  segment_index: number;
  frame_range: [number, number];
  chunks: ChunkTrace[];
  slot_weights: number[][];
  hole_fractions: number[];
}

export interface FrameEntry {
  index: number;
  url: string;
  chunk: number;
  hole_fraction: number;
  slot_weights: number[];
  slot_sources: number[];
  anchors: string[];
}

export interface StepResponse {
  session_id: string;
  status: string;
  new_frame_indices: number[];
  retrieval_trace: SegmentTrace[];
  coverage_fractions: number[];
  coverage_urls: string[];
  frames: FrameEntry[];
}

export interface SessionState extends SessionHandle {
  context_len: number;
  n_generated: number;
  next_frame_index: number;
  bank_size: number;
  history: ActionStep[];
  history_script: string;
  n_chunks: number;
  traces: SegmentTrace[];
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

async function throwFrom(resp: Response): Promise<never> {
  let detail = `${resp.status} ${resp.statusText}`;
  try {
    const body = (await resp.json()) as { detail?: unknown };
    if (typeof body.detail === "string") detail = body.detail;
    else if (body.detail !== undefined) detail = JSON.stringify(body.detail);
  } catch {
    /* non-JSON body: keep the status line */
  }
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  constructor(private readonly baseUrl: string) {}

  /** Service responses carry absolute paths ("/sessions/..."); resolve
   * them against the configured origin. */
  resolve(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.resolve(path), {
      headers: { "content-type": "application/json" },
      ...init,
    });
    if (!resp.ok) await throwFrom(resp);
    return (await resp.json()) as T;
  }

  createSession(opts: {
    sceneSeed?: number;
    contextFrames?: number;
    config?: Record<string, unknown>;
  } = {}): Promise<SessionHandle> {
    const body: Record<string, unknown> = {};
    if (opts.sceneSeed !== undefined) body.scene_seed = opts.sceneSeed;
    if (opts.contextFrames !== undefined) body.context_frames = opts.contextFrames;
    if (opts.config !== undefined) body.config = opts.config;
    return this.json<SessionHandle>("/sessions", {
      method: "POST",
      body: JSON.stringify(body),
    });
  }

  step(sessionId: string, actions: ActionStep[]): Promise<StepResponse> {
    return this.json<StepResponse>(`/sessions/${sessionId}/step`, {
      method: "POST",
      body: JSON.stringify({ actions }),
    });
  }

  getState(sessionId: string): Promise<SessionState> {
    return this.json<SessionState>(`/sessions/${sessionId}/state`);
  }

  async deleteSession(sessionId: string): Promise<void> {
    const resp = await fetch(this.resolve(`/sessions/${sessionId}`), {
      method: "DELETE",
    });
    if (!resp.ok && resp.status !== 204) await throwFrom(resp);
  }
}
