/** Thin typed client over the review service API. The fetch implementation
 * is injectable so tests can run without a server. */

import type { CaseDetail, CaseRating, CaseSummary, RatingSummary } from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly url: string,
    detail: string,
  ) {
    super(`${status} from ${url}: ${detail}`);
  }
}

export class ApiClient {
  constructor(
    private readonly raterId: string = "anonymous",
    private readonly fetchImpl: FetchLike = (i, init) => fetch(i, init),
    private readonly baseUrl: string = "",
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const url = this.baseUrl + path;
    const resp = await this.fetchImpl(url, {
      ...init,
      headers: {
        "X-Rater-Id": this.raterId,
        ...(init?.body ? { "Content-Type": "application/json" } : {}),
        ...init?.headers,
      },
    });
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        /* non-JSON error body: keep statusText */
      }
      throw new ApiError(resp.status, url, detail);
    }
    return (await resp.json()) as T;
  }

  listCases(): Promise<CaseSummary[]> {
    return this.request<CaseSummary[]>("/api/cases");
  }

  getCase(examId: string): Promise<CaseDetail> {
    return this.request<CaseDetail>(`/api/cases/${encodeURIComponent(examId)}`);
  }

  submitRating(examId: string, rating: CaseRating): Promise<{ status: string }> {
    return this.request(`/api/cases/${encodeURIComponent(examId)}/rating`, {
      method: "POST",
      body: JSON.stringify(rating),
    });
  }

  getSummary(): Promise<RatingSummary> {
    return this.request<RatingSummary>("/api/summary");
  }
}
