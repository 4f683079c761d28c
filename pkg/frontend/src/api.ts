/**
 * Thin HTTP client for the rating service. The fetch implementation is
 * injectable so tests can run against a scripted transport.
 */

import {
  PresentedInstance,
  SubmitOutcome,
  TrainingExample,
  parsePresentedInstance,
  parseTrainingExamples,
} from "./types.js";

export type FetchLike = (
  input: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{
  status: number;
  json(): Promise<unknown>;
}>;

async function detailOf(response: { json(): Promise<unknown> }): Promise<string> {
  try {
    const body = (await response.json()) as Record<string, unknown>;
    if (typeof body?.detail === "string") return body.detail;
    return JSON.stringify(body);
  } catch {
    return "request rejected";
  }
}

export class RaterApiClient {
  private readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    // Browsers reject global fetch invoked with a foreign `this`, so keep it
    // bound to the global object.
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  async fetchTrainingExamples(): Promise<TrainingExample[]> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/v1/training_examples`);
    if (response.status !== 200) {
      throw new Error(`training examples request failed (${response.status})`);
    }
    return parseTrainingExamples(await response.json());
  }

  /** Next instance for this rater, or null when the server has none (204). */
  async fetchAssignment(raterId: string): Promise<PresentedInstance | null> {
    const url = `${this.baseUrl}/api/v1/assignment?rater_id=${encodeURIComponent(raterId)}`;
    const response = await this.fetchImpl(url);
    if (response.status === 204) return null;
    if (response.status !== 200) {
      throw new Error(`assignment request failed (${response.status})`);
    }
    return parsePresentedInstance(await response.json());
  }

  async submitResponse(
    raterId: string,
    instanceId: string,
    chosenIndex: number,
    permutationToken: string,
  ): Promise<SubmitOutcome> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/v1/response`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        rater_id: raterId,
        instance_id: instanceId,
        chosen_index: chosenIndex,
        permutation_token: permutationToken,
      }),
    });
    if (response.status === 201) return { kind: "recorded" };
    if (response.status === 409 || response.status === 422) {
      return { kind: "rejected", status: response.status, detail: await detailOf(response) };
    }
    throw new Error(`response submit failed (${response.status})`);
  }

  async fetchReport(): Promise<Record<string, unknown>> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/v1/report`);
    if (response.status !== 200) {
      throw new Error(`report request failed (${response.status})`);
    }
    return (await response.json()) as Record<string, unknown>;
  }
}
