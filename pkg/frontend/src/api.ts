// Thin client over the inference service's HTTP API.

import type { PredictResponse } from "./types";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    message: string,
    public readonly status: number,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async predict(file: Blob, filename: string): Promise<PredictResponse> {
    const form = new FormData();
    form.append("file", file, filename);
    const response = await this.fetchImpl(`${this.baseUrl}/predict`, {
      method: "POST",
      body: form,
    });
    if (!response.ok) {
      let detail = `server returned ${response.status}`;
      try {
        const body = await response.json();
        if (body && typeof body.detail === "string") {
          detail = body.detail;
        }
      } catch {
        // non-JSON error body; keep the status message
      }
      throw new ApiError(detail, response.status);
    }
    return (await response.json()) as PredictResponse;
  }

  async health(): Promise<{ status: string; model_version: string }> {
    const response = await this.fetchImpl(`${this.baseUrl}/health`);
    if (!response.ok) {
      throw new ApiError(`health check failed (${response.status})`, response.status);
    }
    return await response.json();
  }
}
