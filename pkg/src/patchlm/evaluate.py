"""Benchmark evaluation protocols for detail-probing QA records.

Two protocols per record:

* multiple-choice - the prompt carries a letter hint plus four lettered
  options; scoring is strict match of the (normalized) response against the
  gold letter. Raw-strict accuracy (no normalization at all) is reported
  alongside.
* free-form - the bare question is asked with no options; a yes/no judge
  decides correctness. The deterministic local stub says yes iff every
  normalized gold token appears in the response; the external client speaks
  the chat-completions JSON dialect with retries, backoff and a hard
  per-call timeout, and records unjudgeable records instead of failing.
"""

from __future__ import annotations

import json
import os
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .lora import LoraModel
from .model import ModelParams, decode_greedy
from .patchify import RawImage, ResizePolicy
from .pipeline import EOS, prompt_sequence

MC_HINT = "Answer with the option letter from the given choices directly"
LETTERS = "ABCD"


@dataclass
class QARecord:
    """One QA item: image, question, four options, gold letter + free-form gold."""

    record_id: str
    image_ref: Union[str, Path, RawImage]
    question: str
    options: list[str]
    gold_letter: str
    gold_freeform: str
    qtype: str = "other"

    def __post_init__(self):
        if len(self.options) != 4:
            raise ContractError(f"{self.record_id}: need exactly 4 options, got {len(self.options)}")
        if len(set(self.options)) != 4:
            raise ContractError(f"{self.record_id}: options must be distinct")
        if self.gold_letter not in LETTERS:
            raise ContractError(f"{self.record_id}: gold letter {self.gold_letter!r} not in A-D")
        gold_option = self.options[LETTERS.index(self.gold_letter)]
        if gold_option != self.gold_freeform:
            raise ContractError(
                f"{self.record_id}: gold option {gold_option!r} != free-form gold "
                f"{self.gold_freeform!r}"
            )


def load_qa_records(path) -> list[QARecord]:
    """JSONL of records; image paths are relative to the dataset file."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    records = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            image = obj["image_ref"]
            if not Path(image).is_absolute():
                image = path.parent / image
            records.append(
                QARecord(
                    record_id=obj.get("id", f"record{i:04d}"),
                    image_ref=image,
                    question=obj["question"],
                    options=list(obj["options"]),
                    gold_letter=obj["gold_letter"],
                    gold_freeform=obj["gold_freeform"],
                    qtype=obj.get("qtype", "other"),
                )
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}:{i + 1}: bad record: {exc}") from exc
    return records


# -- multiple choice -------------------------------------------------------------


def format_mc_prompt(record: QARecord) -> str:
    """Hint line, then the question, then 'A. ...' through 'D. ...'."""
    lines = [MC_HINT, record.question]
    lines += [f"{letter}. {opt}" for letter, opt in zip(LETTERS, record.options)]
    return "\n".join(lines)


def normalize_mc_response(response: str) -> str:
    """Trim whitespace, strip one trailing punctuation mark, uppercase."""
    out = response.strip()
    if out and out[-1] in string.punctuation:
        out = out[:-1]
    return out.upper()


def score_mc(response: str, gold_letter: str) -> bool:
    """Strict match: the normalized response must be exactly the gold letter."""
    normalized = normalize_mc_response(response)
    return normalized == gold_letter.upper()


# -- free form -------------------------------------------------------------------


def _content_tokens(text: str) -> set[str]:
    table = str.maketrans({c: " " for c in string.punctuation})
    return set(text.lower().translate(table).split())


class StubJudge:
    """Pure, deterministic yes/no: gold tokens must all appear in the response."""

    source = "stub"

    def submit(self, question: str, gold: str, response: str) -> str:
        gold_tokens = _content_tokens(gold)
        return "yes" if gold_tokens and gold_tokens <= _content_tokens(response) else "no"


JUDGE_SYSTEM_PROMPT = (
    "You grade answers to visual questions. Given the question, the reference "
    "answer, and a candidate response, reply with exactly one word: yes if the "
    "response conveys the reference answer, otherwise no."
)

ENDPOINT_ENV = "PATCHLM_JUDGE_ENDPOINT"
API_KEY_ENV = "PATCHLM_JUDGE_API_KEY"
MODEL_ENV = "PATCHLM_JUDGE_MODEL"


class JudgeUnavailable(Exception):
    """All retries failed or timed out; the verdict stays unjudged."""


class ExternalJudge:
    """Chat-completions style HTTP judge with retry/backoff and timeouts.

    Endpoint and key come from PATCHLM_JUDGE_ENDPOINT / PATCHLM_JUDGE_API_KEY
    unless given explicitly. ``transport`` is injectable for tests and must
    behave like requests.post.
    """

    source = "external"

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 10.0,
        retries: int = 3,
        backoff: float = 0.5,
        transport: Optional[Callable] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ConfigError(f"external judge needs an endpoint ({ENDPOINT_ENV})")
        self.api_key = api_key or os.environ.get(API_KEY_ENV, "")
        self.model = model or os.environ.get(MODEL_ENV, "gpt-4")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        if transport is None:
            import requests

            transport = requests.post
        self._post = transport

    def submit(self, question: str, gold: str, response: str) -> str:
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": JUDGE_SYSTEM_PROMPT},
                {
                    "role": "user",
                    "content": (
                        f"Question: {question}\nReference answer: {gold}\n"
                        f"Response: {response}\nVerdict:"
                    ),
                },
            ],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = self._post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"]
                verdict = text.strip().lower()
                if verdict.startswith("yes"):
                    return "yes"
                if verdict.startswith("no"):
                    return "no"
                raise ValueError(f"unparseable verdict: {text!r}")
            except Exception as exc:  # noqa: BLE001 - every failure is retryable
                last_error = exc
                if attempt + 1 < self.retries:
                    self._sleep(self.backoff * 2**attempt)
        raise JudgeUnavailable(str(last_error))


# -- verdicts and reports ----------------------------------------------------------


@dataclass
class Verdict:
    record_id: str
    protocol: str  # "mc" | "freeform"
    raw_response: str
    correct: bool | None  # None = unjudged (judge unavailable)
    judge_source: str  # "exact" | "stub" | "external"
    qtype: str = "other"
    raw_strict: bool | None = None  # mc only: exact match without normalization


def score_freeform(record: QARecord, response: str, judge) -> Verdict:
    try:
        verdict = judge.submit(record.question, record.gold_freeform, response)
        correct: bool | None = verdict == "yes"
    except JudgeUnavailable:
        correct = None
    return Verdict(
        record_id=record.record_id,
        protocol="freeform",
        raw_response=response,
        correct=correct,
        judge_source=judge.source,
        qtype=record.qtype,
    )


def score_mc_record(record: QARecord, response: str) -> Verdict:
    return Verdict(
        record_id=record.record_id,
        protocol="mc",
        raw_response=response,
        correct=score_mc(response, record.gold_letter),
        judge_source="exact",
        qtype=record.qtype,
        raw_strict=response == record.gold_letter,
    )


def report(verdicts: list[Verdict]) -> dict:
    """Accuracy per protocol and per question type; protocols never pool."""
    if not verdicts:
        raise ContractError("report needs at least one verdict")
    seen: set[tuple[str, str]] = set()
    for v in verdicts:
        key = (v.record_id, v.protocol)
        if key in seen:
            raise ContractError(f"duplicate verdict for {key}")
        seen.add(key)
    out: dict = {"protocols": {}, "unjudged": 0}
    for protocol in ("mc", "freeform"):
        vs = [v for v in verdicts if v.protocol == protocol]
        if not vs:
            continue
        judged = [v for v in vs if v.correct is not None]
        unjudged = len(vs) - len(judged)
        out["unjudged"] += unjudged
        section: dict = {"records": len(vs), "judged": len(judged), "unjudged": unjudged}
        if judged:
            section["accuracy_pct"] = round(100.0 * sum(v.correct for v in judged) / len(judged), 2)
            per_type: dict = {}
            for qtype in sorted({v.qtype for v in judged}):
                sub = [v for v in judged if v.qtype == qtype]
                per_type[qtype] = {
                    "judged": len(sub),
                    "accuracy_pct": round(100.0 * sum(v.correct for v in sub) / len(sub), 2),
                }
            section["per_qtype"] = per_type
            if protocol == "mc":
                section["raw_strict_accuracy_pct"] = round(
                    100.0 * sum(bool(v.raw_strict) for v in judged) / len(judged), 2
                )
        out["protocols"][protocol] = section
    return out


def render_report_text(rep: dict) -> str:
    lines = []
    for protocol, section in rep["protocols"].items():
        if "accuracy_pct" in section:
            lines.append(
                f"{protocol}: {section['accuracy_pct']:5.1f}%  "
                f"({section['judged']} judged, {section['unjudged']} unjudged)"
            )
            for qtype, sub in section.get("per_qtype", {}).items():
                lines.append(f"  {qtype:15s} {sub['accuracy_pct']:5.1f}%  (n={sub['judged']})")
        else:
            lines.append(f"{protocol}: no judged records ({section['unjudged']} unjudged)")
    return "\n".join(lines)


# -- model wiring ------------------------------------------------------------------


def decode_response(
    params: ModelParams,
    instruction: str,
    image_ref,
    policy: ResizePolicy,
    adapters: LoraModel | None = None,
    max_new: int = 24,
    rng: np.random.Generator | None = None,
) -> str:
    seq = prompt_sequence(instruction, image_ref, policy, rng)
    ids = decode_greedy(params, seq, max_new=max_new, eos_id=EOS, adapters=adapters)
    return bytes(t for t in ids if t < 256).decode("utf-8", errors="replace")


def evaluate_model(
    params: ModelParams,
    records: list[QARecord],
    protocol: str,
    policy: ResizePolicy,
    judge=None,
    adapters: LoraModel | None = None,
    max_new: int = 24,
    judge_concurrency: int = 4,
) -> list[Verdict]:
    """Run the model over records under one or both protocols."""
    if protocol not in ("mc", "freeform", "both"):
        raise ConfigError(f"protocol must be mc|freeform|both, got {protocol!r}")
    verdicts: list[Verdict] = []
    if protocol in ("mc", "both"):
        for r in records:
            response = decode_response(
                params, format_mc_prompt(r), r.image_ref, policy, adapters, max_new
            )
            verdicts.append(score_mc_record(r, response))
    if protocol in ("freeform", "both"):
        judge = judge or StubJudge()
        responses = [
            decode_response(params, r.question, r.image_ref, policy, adapters, max_new)
            for r in records
        ]
        workers = max(1, judge_concurrency) if isinstance(judge, ExternalJudge) else 1
        with ThreadPoolExecutor(max_workers=workers) as pool:
            verdicts.extend(
                pool.map(lambda pair: score_freeform(pair[0], pair[1], judge), zip(records, responses))
            )
    return verdicts
