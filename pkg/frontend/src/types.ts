/**
 * Payload types for the rating service API, plus the runtime guards the
 * client uses before trusting a response body.
 *
 * The shapes mirror the server exactly. Candidates arrive already shuffled;
 * the display order IS the payload order and must never be rearranged here.
 * Evaluation payloads carry no label information of any kind.
 */

export type PresentedCandidate = {
  index: number;
  text: string;
};

export type PresentedInstance = {
  instance_id: string;
  image_url: string;
  candidates: PresentedCandidate[];
  permutation_token: string;
};

export type TrainingExample = {
  instance_id: string;
  image_url: string;
  candidates: PresentedCandidate[];
  ground_truth_index: number;
  instruction: string;
};

export type SubmitOutcome =
  | { kind: "recorded" }
  | { kind: "rejected"; status: number; detail: string };

function isCandidate(value: unknown): value is PresentedCandidate {
  if (typeof value !== "object" || value === null) return false;
  const c = value as Record<string, unknown>;
  return typeof c.index === "number" && typeof c.text === "string";
}

function candidatesOk(value: unknown): value is PresentedCandidate[] {
  return Array.isArray(value) && value.length > 0 && value.every(isCandidate);
}

export function parsePresentedInstance(value: unknown): PresentedInstance {
  const v = (value ?? {}) as Record<string, unknown>;
  if (
    typeof v.instance_id !== "string" ||
    typeof v.image_url !== "string" ||
    typeof v.permutation_token !== "string" ||
    !candidatesOk(v.candidates)
  ) {
    throw new Error("malformed assignment payload");
  }
  return {
    instance_id: v.instance_id,
    image_url: v.image_url,
    candidates: v.candidates,
    permutation_token: v.permutation_token,
  };
}

export function parseTrainingExamples(value: unknown): TrainingExample[] {
  if (!Array.isArray(value)) throw new Error("malformed training payload");
  return value.map((raw) => {
    const v = (raw ?? {}) as Record<string, unknown>;
    if (
      typeof v.instance_id !== "string" ||
      typeof v.image_url !== "string" ||
      typeof v.ground_truth_index !== "number" ||
      typeof v.instruction !== "string" ||
      !candidatesOk(v.candidates)
    ) {
      throw new Error("malformed training payload");
    }
    return {
      instance_id: v.instance_id,
      image_url: v.image_url,
      candidates: v.candidates,
      ground_truth_index: v.ground_truth_index,
      instruction: v.instruction,
    };
  });
}
