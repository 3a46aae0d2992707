"""Pluggable LLM judge client scoring captions on CoI / BMA / TDO (1-10 each)."""

from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import httpx

log = logging.getLogger(__name__)

RUBRIC_PROMPT = """You grade a generated description of a possibly threatening scene against the scene's ground truth.
Score three dimensions with an integer from 1 (worst) to 10 (best):
- CoI (correctness of information): are the entities mentioned exactly those present, with nothing missed or invented?
- BMA (behavior mapping accuracy): is every behavior attributed to the right pair of entities?
- TDO (threat detail orientation): does the text describe the threatening behaviors and their participants specifically rather than generically?
Answer with exactly three lines:
CoI: <1-10>
BMA: <1-10>
TDO: <1-10>"""

_SCORE_RE = {k: re.compile(rf"^\s*{k}\s*:\s*(\d+)\s*$", re.IGNORECASE | re.MULTILINE) for k in ("CoI", "BMA", "TDO")}


class JudgeConfigError(ValueError):
    pass


class JudgeParseError(ValueError):
    pass


class JudgeNetworkError(RuntimeError):
    pass


@dataclass(frozen=True)
class JudgeScore:
    coi: float
    bma: float
    tdo: float
    judge_id: str
    raw_response: str

    def __post_init__(self):
        for v in (self.coi, self.bma, self.tdo):
            if not 1 <= v <= 10:
                raise ValueError(f"judge score {v} outside [1, 10]")


@dataclass(frozen=True)
class JudgeConfig:
    endpoint: str
    model_id: str
    api_key: str | None = None
    generator_ids: tuple[str, ...] = ()
    max_parse_retries: int = 3
    max_network_retries: int = 3
    backoff_base: float = 0.5
    backoff_max: float = 8.0
    max_concurrency: int = 4
    timeout: float = 60.0
    headers: dict = field(default_factory=dict)

    @classmethod
    def from_env(cls, generator_ids: Sequence[str] = (), **overrides) -> "JudgeConfig":
        endpoint = os.environ.get("JUDGE_ENDPOINT")
        model_id = os.environ.get("JUDGE_MODEL_ID")
        if not endpoint or not model_id:
            raise JudgeConfigError("JUDGE_ENDPOINT and JUDGE_MODEL_ID must be set")
        return cls(endpoint, model_id, os.environ.get("JUDGE_API_KEY"), tuple(generator_ids), **overrides)

    def check(self) -> None:
        if self.model_id in self.generator_ids:
            raise JudgeConfigError(
                f"judge {self.model_id!r} also generated the captions; a judge must not grade its own output"
            )
        if self.max_concurrency < 1:
            raise JudgeConfigError("max_concurrency must be >= 1")


def parse_judge_response(text: str) -> tuple[int, int, int]:
    vals = []
    for key, rx in _SCORE_RE.items():
        m = rx.search(text or "")
        if not m:
            raise JudgeParseError(f"judge response lacks a '{key}: <1-10>' line")
        v = int(m.group(1))
        if not 1 <= v <= 10:
            raise JudgeParseError(f"{key} score {v} outside [1, 10]")
        vals.append(v)
    return tuple(vals)


def build_messages(scene_description: str, caption: str) -> list[dict]:
    user = f"Ground truth:\n{scene_description}\n\nCandidate text:\n{caption}"
    return [{"role": "system", "content": RUBRIC_PROMPT}, {"role": "user", "content": user}]


def _completion_text(response: httpx.Response) -> str:
    try:
        body = response.json()
    except (json.JSONDecodeError, ValueError):
        return response.text
    if isinstance(body, dict) and body.get("choices"):
        return body["choices"][0].get("message", {}).get("content") or ""
    if isinstance(body, dict) and "content" in body:
        return str(body["content"])
    return response.text


class JudgeClient:
    def __init__(self, config: JudgeConfig, client: httpx.Client | None = None, sleep=time.sleep):
        config.check()
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep

    def _post(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json", **self.config.headers}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        delay = self.config.backoff_base
        for attempt in range(self.config.max_network_retries + 1):
            try:
                r = self._client.post(self.config.endpoint, json=payload, headers=headers)
                if r.status_code >= 500 or r.status_code == 429:
                    raise httpx.HTTPStatusError(f"status {r.status_code}", request=r.request, response=r)
                r.raise_for_status()
                return _completion_text(r)
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                retryable = not isinstance(exc, httpx.HTTPStatusError) or exc.response.status_code >= 500 \
                    or exc.response.status_code == 429
                if not retryable or attempt == self.config.max_network_retries:
                    raise JudgeNetworkError(f"judge request failed: {exc}") from exc
                log.warning("judge request failed (%s); retrying in %.2fs", exc, delay)
                self._sleep(delay)
                delay = min(delay * 2, self.config.backoff_max)
        raise AssertionError("unreachable")

    def score(self, scene_description: str, caption: str) -> JudgeScore:
        payload = {"model": self.config.model_id, "messages": build_messages(scene_description, caption)}
        last_error = None
        for _ in range(self.config.max_parse_retries + 1):
            text = self._post(payload)
            try:
                coi, bma, tdo = parse_judge_response(text)
                return JudgeScore(coi, bma, tdo, self.config.model_id, text)
            except JudgeParseError as exc:
                last_error = exc
        raise JudgeParseError(
            f"unparseable judge response after {self.config.max_parse_retries} retries: {last_error}"
        )

    def close(self) -> None:
        self._client.close()


def judge_scores(items: Sequence[tuple[str, str]], config: JudgeConfig, client: httpx.Client | None = None) -> list[JudgeScore]:
    """Score (scene description, caption) pairs; results keep the input order."""
    config.check()
    judge = JudgeClient(config, client)
    try:
        if config.max_concurrency == 1:
            return [judge.score(s, c) for s, c in items]
        with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
            return list(pool.map(lambda it: judge.score(*it), items))
    finally:
        if client is None:
            judge.close()
