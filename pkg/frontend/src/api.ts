/* Typed client for the segmentation service HTTP API. */

import type { RleMask } from "./rle.js";
import type { Prompt } from "./state.js";

export interface SceneEntry {
  scene_id: string;
  n_views: number;
  height: number;
  width: number;
  objects: string[];
}

export interface Catalog {
  scenes: SceneEntry[];
  checkpoints: string[];
}

export interface SessionDescriptor {
  session_id: string;
  scene_id: string;
  checkpoint_id: string;
  n_views: number;
  height: number;
  width: number;
  views: string[];
}

export class ApiError extends Error {
  constructor(
    message: string,
    public status: number,
    public code: string,
  ) {
    super(message);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const response = await fetch(url, init);
  if (!response.ok) {
    let code = "http_error";
    let message = `${response.status} ${response.statusText}`;
    try {
      const body = await response.json();
      if (body && body.error) {
        code = body.error.code ?? code;
        message = body.error.message ?? message;
      }
    } catch {
      // non-JSON error body; keep the status line
    }
    throw new ApiError(message, response.status, code);
  }
  return (await response.json()) as T;
}

export class ServiceClient {
  constructor(private base: string = "") {}

  getCatalog(): Promise<Catalog> {
    return request<Catalog>(`${this.base}/scenes`);
  }

  createSession(sceneId: string, checkpointId: string, frames?: number): Promise<SessionDescriptor> {
    const body: Record<string, unknown> = { scene_id: sceneId, checkpoint_id: checkpointId };
    if (frames !== undefined) {
      body.frames = frames;
    }
    return request<SessionDescriptor>(`${this.base}/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  updatePrompts(sessionId: string, prompts: Prompt[]): Promise<RleMask[]> {
    return request<{ masks: RleMask[] }>(`${this.base}/sessions/${sessionId}/prompts`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ prompts }),
    }).then((r) => r.masks);
  }

  viewImageUrl(sessionId: string, view: number): string {
    return `${this.base}/sessions/${sessionId}/views/${view}/image`;
  }

  deleteSession(sessionId: string): Promise<{ deleted: string }> {
    return request<{ deleted: string }>(`${this.base}/sessions/${sessionId}`, {
      method: "DELETE",
    });
  }
}
