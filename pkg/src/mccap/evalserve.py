"""HTTP service that hands caption-choice instances to human raters.

Each rater sees at most six instances, every instance collects three
independent responses, and candidate order is shuffled per (instance, rater).
All state changes append to a JSON-lines log; the aggregate report is
recomputed from that log, so a restarted service resumes exactly where the
previous process stopped.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel

from .dataset import Instance, read_dataset

RESPONSES_PER_INSTANCE = 3
MAX_INSTANCES_PER_RATER = 6
DEFAULT_IDLE_TIMEOUT = 30.0 * 60.0
DEFAULT_MAX_TRAINING_ITEMS = 5

TRAINING_INSTRUCTION = (
    "Read the image description choices carefully. Exactly one of them was "
    "written for this image; the others describe different images. The "
    "correct choice is highlighted so you can calibrate before the task."
)

ENV_BIND = "MCCAP_EVAL_BIND"
ENV_DATASET = "MCCAP_EVAL_DATASET"
ENV_IMAGES = "MCCAP_EVAL_IMAGES"
ENV_LOG = "MCCAP_EVAL_LOG"


class SubmissionError(Exception):
    """Base class for rejected submissions; `status` maps to HTTP."""

    status = 422


class InvalidSubmissionError(SubmissionError):
    status = 422


class DuplicateResponseError(SubmissionError):
    status = 409


class CompletedInstanceError(SubmissionError):
    status = 409


def permutation_seed(instance_id: str, rater_id: str) -> int:
    digest = hashlib.sha256(f"{instance_id}|{rater_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def permutation_token(instance_id: str, rater_id: str) -> str:
    return f"{permutation_seed(instance_id, rater_id):016x}"


def candidate_permutation(instance: Instance, rater_id: str) -> list[int]:
    """Presentation order: slot i shows canonical candidate perm[i]."""
    rng = np.random.default_rng(permutation_seed(instance.instance_id, rater_id))
    return [int(k) for k in rng.permutation(len(instance.candidates))]


@dataclass(frozen=True)
class PresentedAssignment:
    instance_id: str
    image_url: str
    candidates: tuple[tuple[int, str], ...]
    permutation_token: str

    def as_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "image_url": self.image_url,
            "candidates": [{"index": i, "text": t} for i, t in self.candidates],
            "permutation_token": self.permutation_token,
        }


@dataclass(frozen=True)
class AggregateReport:
    total_responses: int
    correct_responses: int
    response_accuracy_percent: float
    complete_instances: int
    partial_instances: int
    count_3_of_3: int
    count_at_least_2: int
    count_at_least_1: int
    count_0_of_3: int
    percent_3_of_3: float
    percent_at_least_2: float
    percent_at_least_1: float
    percent_0_of_3: float

    def as_dict(self) -> dict:
        return asdict(self)


def _percent(count: int, total: int) -> float:
    return round(100.0 * count / total, 1) if total else 0.0


def aggregate(records) -> AggregateReport:
    """Summarize an iterable of log records; pure function of its input.

    Instances with exactly three responses form the agreement breakdown;
    anything still short of three is reported as partial.
    """
    per_instance: dict[str, list[bool]] = defaultdict(list)
    total = correct = 0
    for rec in records:
        if rec.get("kind") != "response":
            continue
        total += 1
        flag = bool(rec["correct"])
        correct += int(flag)
        per_instance[rec["instance_id"]].append(flag)

    complete = [sum(flags) for flags in per_instance.values()
                if len(flags) == RESPONSES_PER_INSTANCE]
    partial = sum(1 for flags in per_instance.values()
                  if len(flags) != RESPONSES_PER_INSTANCE)
    n = len(complete)
    n3 = sum(1 for c in complete if c == 3)
    n2 = sum(1 for c in complete if c >= 2)
    n1 = sum(1 for c in complete if c >= 1)
    n0 = sum(1 for c in complete if c == 0)
    return AggregateReport(
        total_responses=total,
        correct_responses=correct,
        response_accuracy_percent=_percent(correct, total),
        complete_instances=n,
        partial_instances=partial,
        count_3_of_3=n3,
        count_at_least_2=n2,
        count_at_least_1=n1,
        count_0_of_3=n0,
        percent_3_of_3=_percent(n3, n),
        percent_at_least_2=_percent(n2, n),
        percent_at_least_1=_percent(n1, n),
        percent_0_of_3=_percent(n0, n),
    )


def read_log(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid log record "
                                 f"({exc.msg})") from exc
    return records


def load_image_manifest(path) -> dict[str, str]:
    """Sidecar JSON object mapping image_id to a displayable URL."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: image manifest must be a JSON object")
    for key, value in obj.items():
        if not isinstance(value, str):
            raise ValueError(f"{path}: URL for image {key!r} must be a string")
    return obj


class ServiceState:
    """All mutable service state behind one lock, persisted to the log.

    Instances whose split is "train" become worked examples for the
    training_examples endpoint; every other instance is assignable. An
    existing log at `log_path` is replayed on construction.
    """

    def __init__(self, instances, image_urls, log_path, *,
                 idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
                 max_training_items: int = DEFAULT_MAX_TRAINING_ITEMS,
                 clock=time.time):
        if idle_timeout <= 0:
            raise ValueError(f"idle_timeout must be positive, got {idle_timeout}")
        instances = list(instances)
        ids = [inst.instance_id for inst in instances]
        if len(set(ids)) != len(ids):
            raise ValueError("dataset contains duplicate instance ids")

        pool = sorted((i for i in instances if i.split != "train"),
                      key=lambda i: i.instance_id)
        training = sorted((i for i in instances if i.split == "train"),
                          key=lambda i: i.instance_id)[:max_training_items]
        missing = sorted({i.image_id for i in pool + training
                          if i.image_id not in image_urls})
        if missing:
            raise ValueError("image manifest is missing URLs for: "
                             + ", ".join(missing[:5]))

        self._pool = {i.instance_id: i for i in pool}
        self._training = training
        self._urls = dict(image_urls)
        self._idle_timeout = float(idle_timeout)
        self._clock = clock
        self._log_path = Path(log_path)
        self._lock = threading.Lock()

        self._counts = {iid: 0 for iid in self._pool}
        self._served: dict[str, set[str]] = {}
        self._responses: dict[tuple[str, str], int] = {}
        self._outstanding: dict[tuple[str, str], float] = {}
        for rec in read_log(self._log_path):
            self._apply(rec)

    @property
    def log_path(self) -> Path:
        return self._log_path

    def _apply(self, rec: dict) -> None:
        iid = rec["instance_id"]
        if iid not in self._pool:
            raise ValueError(f"log references unknown instance {iid!r}; "
                             "log and dataset do not match")
        key = (rec["rater_id"], iid)
        if rec["kind"] == "assignment":
            self._served.setdefault(rec["rater_id"], set()).add(iid)
            self._outstanding[key] = float(rec["at"])
        elif rec["kind"] == "response":
            self._responses[key] = int(rec["canonical_index"])
            self._counts[iid] += 1
            self._outstanding.pop(key, None)
        else:
            raise ValueError(f"unknown log record kind {rec['kind']!r}")

    def _append(self, rec: dict) -> None:
        with open(self._log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def _present(self, instance_id: str, rater_id: str) -> PresentedAssignment:
        inst = self._pool[instance_id]
        perm = candidate_permutation(inst, rater_id)
        shown = tuple((slot, inst.candidates[perm[slot]].text)
                      for slot in range(len(perm)))
        return PresentedAssignment(instance_id=instance_id,
                                   image_url=self._urls[inst.image_id],
                                   candidates=shown,
                                   permutation_token=permutation_token(
                                       instance_id, rater_id))

    def next_assignment(self, rater_id: str):
        """Serve the least-answered eligible instance, or None.

        A rater holding an unanswered assignment gets the same instance back
        (same shuffle, refreshed idle clock). Assignments idle past the
        timeout stop counting toward an instance's pending coverage, letting
        another rater pick it up.
        """
        if not rater_id:
            raise ValueError("rater_id must be non-empty")
        with self._lock:
            now = float(self._clock())
            held = [iid for (r, iid) in self._outstanding
                    if r == rater_id
                    and self._counts[iid] < RESPONSES_PER_INSTANCE]
            if held:
                iid = held[0]
                self._append({"kind": "assignment", "rater_id": rater_id,
                              "instance_id": iid, "at": now})
                self._outstanding[(rater_id, iid)] = now
                return self._present(iid, rater_id)

            served = self._served.get(rater_id, set())
            if len(served) >= MAX_INSTANCES_PER_RATER:
                return None

            best = None
            for iid in self._pool:
                count = self._counts[iid]
                if count >= RESPONSES_PER_INSTANCE or iid in served:
                    continue
                active = sum(
                    1 for (r, other), at in self._outstanding.items()
                    if other == iid and now - at < self._idle_timeout
                    and self._counts[other] < RESPONSES_PER_INSTANCE)
                if count + active >= RESPONSES_PER_INSTANCE:
                    continue
                if best is None or (count, iid) < best:
                    best = (count, iid)
            if best is None:
                return None
            iid = best[1]
            self._append({"kind": "assignment", "rater_id": rater_id,
                          "instance_id": iid, "at": now})
            self._served.setdefault(rater_id, set()).add(iid)
            self._outstanding[(rater_id, iid)] = now
            return self._present(iid, rater_id)

    def submit_response(self, rater_id: str, instance_id: str,
                        chosen_index: int, token: str) -> None:
        with self._lock:
            inst = self._pool.get(instance_id)
            if inst is None:
                raise InvalidSubmissionError(f"unknown instance {instance_id!r}")
            if not 0 <= chosen_index < len(inst.candidates):
                raise InvalidSubmissionError(
                    f"chosen_index {chosen_index} out of range for "
                    f"{len(inst.candidates)} candidates")
            if token != permutation_token(instance_id, rater_id):
                raise InvalidSubmissionError("permutation token mismatch")
            key = (rater_id, instance_id)
            if key in self._responses:
                raise DuplicateResponseError(
                    f"rater {rater_id!r} already answered {instance_id!r}")
            if key not in self._outstanding:
                raise InvalidSubmissionError(
                    f"no outstanding assignment of {instance_id!r} "
                    f"for rater {rater_id!r}")
            if self._counts[instance_id] >= RESPONSES_PER_INSTANCE:
                raise CompletedInstanceError(
                    f"instance {instance_id!r} already has "
                    f"{RESPONSES_PER_INSTANCE} responses")

            perm = candidate_permutation(inst, rater_id)
            canonical = perm[chosen_index]
            self._append({"kind": "response", "rater_id": rater_id,
                          "instance_id": instance_id,
                          "presented_index": chosen_index,
                          "canonical_index": canonical,
                          "correct": canonical == inst.target_index,
                          "at": float(self._clock())})
            self._responses[key] = canonical
            self._counts[instance_id] += 1
            del self._outstanding[key]

    def training_examples(self) -> list[dict]:
        items = []
        for inst in self._training:
            items.append({
                "instance_id": inst.instance_id,
                "image_url": self._urls[inst.image_id],
                "candidates": [{"index": i, "text": c.text}
                               for i, c in enumerate(inst.candidates)],
                "ground_truth_index": inst.target_index,
                "instruction": TRAINING_INSTRUCTION,
            })
        return items

    def snapshot(self) -> dict:
        """Copies of the derived state, for replay/equality checks."""
        with self._lock:
            return {
                "counts": dict(self._counts),
                "served": {r: frozenset(s) for r, s in self._served.items()},
                "responses": dict(self._responses),
                "outstanding": dict(self._outstanding),
            }


class ResponseBody(BaseModel):
    rater_id: str
    instance_id: str
    chosen_index: int
    permutation_token: str


def state_from_env(environ=os.environ) -> ServiceState:
    missing = [name for name in (ENV_DATASET, ENV_IMAGES, ENV_LOG)
               if not environ.get(name)]
    if missing:
        raise ValueError("missing environment variables: " + ", ".join(missing))
    return ServiceState(read_dataset(environ[ENV_DATASET]),
                        load_image_manifest(environ[ENV_IMAGES]),
                        environ[ENV_LOG])


def create_app(state: ServiceState | None = None) -> FastAPI:
    if state is None:
        state = state_from_env()
    app = FastAPI(title="mccap rater service")

    @app.get("/api/v1/assignment")
    def get_assignment(rater_id: str = Query(min_length=1)):
        assignment = state.next_assignment(rater_id)
        if assignment is None:
            return Response(status_code=204)
        return assignment.as_dict()

    @app.post("/api/v1/response", status_code=201)
    def post_response(body: ResponseBody):
        try:
            state.submit_response(body.rater_id, body.instance_id,
                                  body.chosen_index, body.permutation_token)
        except SubmissionError as exc:
            raise HTTPException(status_code=exc.status, detail=str(exc))
        return {"status": "recorded"}

    @app.get("/api/v1/report")
    def get_report():
        return aggregate(read_log(state.log_path)).as_dict()

    @app.get("/api/v1/training_examples")
    def get_training_examples():
        return state.training_examples()

    return app
