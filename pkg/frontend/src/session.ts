/**
 * Rater session state machine.
 *
 * All transitions are driven through the public methods; the current screen
 * is exposed as a plain view object so rendering stays a pure function.
 * Submission is guarded so a rendered instance can produce at most one
 * in-flight POST no matter how fast the rater clicks, and the machine only
 * advances once the server acknowledges with 201.
 */

import { RaterApiClient } from "./api.js";
import { PresentedInstance, TrainingExample } from "./types.js";

export type SessionView =
  | { kind: "loading" }
  | { kind: "training"; item: TrainingExample; position: number; total: number }
  | {
      kind: "rating";
      instance: PresentedInstance;
      selection: number | null;
      posting: boolean;
      error: string | null;
    }
  | { kind: "done" }
  | { kind: "fatal"; message: string };

export class RaterSession {
  private readonly client: RaterApiClient;
  private readonly raterId: string;
  private viewState: SessionView = { kind: "loading" };
  private training: TrainingExample[] = [];
  private trainingPosition = 0;
  private busy = false;

  constructor(client: RaterApiClient, raterId: string) {
    this.client = client;
    this.raterId = raterId;
  }

  view(): SessionView {
    return this.viewState;
  }

  async start(): Promise<void> {
    try {
      this.training = await this.client.fetchTrainingExamples();
    } catch (error) {
      this.viewState = { kind: "fatal", message: describe(error) };
      return;
    }
    this.trainingPosition = 0;
    if (this.training.length === 0) {
      await this.advanceToNextInstance();
      return;
    }
    this.showTraining();
  }

  /** Confirm the current training item; unlocks evaluation after the last. */
  async acknowledgeTraining(): Promise<void> {
    if (this.viewState.kind !== "training" || this.busy) return;
    this.trainingPosition += 1;
    if (this.trainingPosition >= this.training.length) {
      await this.advanceToNextInstance();
      return;
    }
    this.showTraining();
  }

  select(index: number): void {
    if (this.viewState.kind !== "rating" || this.viewState.posting) return;
    if (index < 0 || index >= this.viewState.instance.candidates.length) return;
    this.viewState = { ...this.viewState, selection: index, error: null };
  }

  /**
   * Send the current selection. A second call while the first POST is in
   * flight is ignored, and a rejection (409/422) keeps the instance on
   * screen with the server's explanation.
   */
  async submitChoice(): Promise<void> {
    const current = this.viewState;
    if (current.kind !== "rating" || current.posting || current.selection === null) {
      return;
    }
    this.viewState = { ...current, posting: true, error: null };
    let outcome;
    try {
      outcome = await this.client.submitResponse(
        this.raterId,
        current.instance.instance_id,
        current.selection,
        current.instance.permutation_token,
      );
    } catch (error) {
      this.viewState = { ...current, posting: false, error: describe(error) };
      return;
    }
    if (outcome.kind === "recorded") {
      await this.advanceToNextInstance();
      return;
    }
    this.viewState = { ...current, posting: false, error: outcome.detail };
  }

  private showTraining(): void {
    const item = this.training[this.trainingPosition];
    if (item === undefined) {
      this.viewState = { kind: "fatal", message: "training item out of range" };
      return;
    }
    this.viewState = {
      kind: "training",
      item,
      position: this.trainingPosition,
      total: this.training.length,
    };
  }

  private async advanceToNextInstance(): Promise<void> {
    this.busy = true;
    this.viewState = { kind: "loading" };
    try {
      const instance = await this.client.fetchAssignment(this.raterId);
      this.viewState = instance === null
        ? { kind: "done" }
        : { kind: "rating", instance, selection: null, posting: false, error: null };
    } catch (error) {
      this.viewState = { kind: "fatal", message: describe(error) };
    } finally {
      this.busy = false;
    }
  }
}

function describe(error: unknown): string {
  return error instanceof Error ? error.message : String(error);
}

/**
 * Drive a full session programmatically: acknowledge every training item,
 * then answer each assigned instance with the index `choose` returns.
 * The browser uses the same machine interactively; this loop exists for
 * scripted flows and end-to-end tests.
 */
export async function runScriptedSession(
  client: RaterApiClient,
  raterId: string,
  choose: (instance: PresentedInstance) => number,
): Promise<number> {
  const session = new RaterSession(client, raterId);
  await session.start();
  let answered = 0;
  for (;;) {
    const view = session.view();
    if (view.kind === "training") {
      await session.acknowledgeTraining();
    } else if (view.kind === "rating") {
      session.select(choose(view.instance));
      await session.submitChoice();
      const after = session.view();
      if (after.kind === "rating" && after.error !== null) {
        throw new Error(`submission rejected: ${after.error}`);
      }
      answered += 1;
    } else if (view.kind === "done") {
      return answered;
    } else if (view.kind === "fatal") {
      throw new Error(view.message);
    } else {
      throw new Error("session stalled while loading");
    }
  }
}
