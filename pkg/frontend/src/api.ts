import type { Judgment, NextResponse } from "./types.js";

export class AuthError extends Error {
  constructor() {
    super("reviewer token rejected");
    this.name = "AuthError";
  }
}

export class ConflictError extends Error {
  constructor() {
    super("case already judged with a different verdict");
    this.name = "ConflictError";
  }
}

export class NetworkError extends Error {
  constructor(cause: unknown) {
    super(`network failure: ${String(cause)}`);
    this.name = "NetworkError";
  }
}

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(`API error ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the review API's fixed endpoint contract. */
export class ReviewApi {
  constructor(
    private baseUrl: string,
    private token: string,
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private headers(): Record<string, string> {
    return {
      Authorization: `Bearer ${this.token}`,
      "Content-Type": "application/json",
    };
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new NetworkError(err);
    }
    if (response.status === 401) throw new AuthError();
    if (response.status === 409) throw new ConflictError();
    if (!response.ok) {
      const detail = await response.text().catch(() => "");
      throw new ApiError(response.status, detail);
    }
    return response;
  }

  async health(): Promise<{ version: string }> {
    const response = await this.request("/health");
    return response.json();
  }

  async next(): Promise<NextResponse> {
    const response = await this.request("/next", { headers: this.headers() });
    return response.json();
  }

  async submit(judgment: Judgment): Promise<{ ok: boolean; duplicate?: boolean }> {
    const response = await this.request("/judgment", {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify(judgment),
    });
    return response.json();
  }
}
