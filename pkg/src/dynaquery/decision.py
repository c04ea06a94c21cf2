"""Three-way relevance decisions over a (question, rationale) pair."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from typing import Protocol

import httpx

from .modelgate import Gateway
from .prompts import fenced_blocks, load_prompt, repair_text

RULE_TEMPLATE = "decision_rule.v1"
DESCRIPTIVE_TEMPLATE = "decision_descriptive.v1"


class DecisionLabel(str, enum.Enum):
    ACCEPT = "ACCEPT"
    RECOMMEND = "RECOMMEND"
    REJECT = "REJECT"

    @classmethod
    def parse(cls, token: str) -> DecisionLabel:
        try:
            return cls(token.strip().strip("*.`'\"").upper())
        except ValueError:
            raise DecisionParseError(f"not a decision label: {token!r}") from None


class ConstraintStatus(str, enum.Enum):
    MET = "met"
    NOT_MET = "not_met"
    UNVERIFIABLE = "unverifiable"


class DecisionError(Exception):
    pass


class DecisionParseError(DecisionError):
    pass


class ClassifierTransportError(DecisionError):
    pass


class InvalidLabelError(DecisionError):
    pass


@dataclass(frozen=True)
class ConstraintChecklist:
    constraints: tuple[str, ...]
    satisfied: tuple[ConstraintStatus, ...]

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        object.__setattr__(self, "satisfied", tuple(ConstraintStatus(s) for s in self.satisfied))
        if len(self.constraints) != len(self.satisfied):
            raise ValueError("constraints and statuses must have the same length")
        if not self.constraints:
            raise ValueError("a checklist needs at least one constraint")

    @property
    def met_count(self) -> int:
        return sum(s is ConstraintStatus.MET for s in self.satisfied)

    def to_list(self) -> list[dict[str, str]]:
        return [{"constraint": c, "status": s.value}
                for c, s in zip(self.constraints, self.satisfied)]


def rule(checklist: ConstraintChecklist) -> DecisionLabel:
    """All met: ACCEPT. Some met: RECOMMEND. None met: REJECT. Unverifiable is not met."""
    met = checklist.met_count
    if met == len(checklist.satisfied):
        return DecisionLabel.ACCEPT
    if met > 0:
        return DecisionLabel.RECOMMEND
    return DecisionLabel.REJECT


_STATUS_ALIASES = {"met": "met", "not_met": "not_met", "not met": "not_met",
                   "unmet": "not_met", "unverifiable": "unverifiable", "unknown": "unverifiable"}


def parse_checklist(text: str) -> ConstraintChecklist:
    blocks = [body for tag, body in fenced_blocks(text) if tag in ("checklist", "json", "")]
    if not blocks:
        raise DecisionParseError("no fenced checklist block found")
    try:
        data = json.loads(blocks[-1])
    except json.JSONDecodeError as exc:
        raise DecisionParseError(f"checklist is not valid JSON: {exc.msg}") from exc
    if not isinstance(data, list) or not data:
        raise DecisionParseError("checklist must be a non-empty JSON list")
    constraints, statuses = [], []
    for item in data:
        if not isinstance(item, dict) or not isinstance(item.get("constraint"), str):
            raise DecisionParseError("each checklist item needs a 'constraint' string")
        raw = str(item.get("status", "")).strip().casefold()
        if raw not in _STATUS_ALIASES:
            raise DecisionParseError(f"unknown status {item.get('status')!r}")
        constraints.append(item["constraint"])
        statuses.append(_STATUS_ALIASES[raw])
    return ConstraintChecklist(tuple(constraints), tuple(statuses))


def parse_final_label(text: str) -> DecisionLabel:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise DecisionParseError("empty response")
    last = lines[-1].strip()
    if len(last.split()) != 1:
        raise DecisionParseError(f"final line is not a single label token: {last!r}")
    return DecisionLabel.parse(last)


def _require_rationale(rationale: str) -> None:
    if not rationale or not rationale.strip():
        raise ValueError("rationale must be non-empty")


def decide_rule_based(query: str, rationale: str,
                      gateway: Gateway) -> tuple[DecisionLabel, ConstraintChecklist]:
    _require_rationale(rationale)
    system, user = load_prompt(RULE_TEMPLATE).render(question=query, rationale=rationale)
    message = user
    for attempt in range(2):
        resp = gateway.complete(gateway.request(system, [message], template_id=RULE_TEMPLATE))
        try:
            checklist = parse_checklist(resp.text)
        except DecisionParseError as exc:
            if attempt:
                raise DecisionParseError(f"checklist unparseable after repair: {exc}") from exc
            message = repair_text(user, resp.text, str(exc))
            continue
        return rule(checklist), checklist
    raise AssertionError("unreachable")


def decide_descriptive(query: str, rationale: str, gateway: Gateway) -> DecisionLabel:
    _require_rationale(rationale)
    system, user = load_prompt(DESCRIPTIVE_TEMPLATE).render(question=query, rationale=rationale)
    message = user
    for attempt in range(2):
        resp = gateway.complete(gateway.request(system, [message],
                                                template_id=DESCRIPTIVE_TEMPLATE))
        try:
            return parse_final_label(resp.text)
        except DecisionParseError as exc:
            if attempt:
                raise DecisionParseError(f"label unparseable after repair: {exc}") from exc
            message = repair_text(user, resp.text,
                                  f"{exc}. The final line must be exactly one of "
                                  "ACCEPT, RECOMMEND or REJECT.")
    raise AssertionError("unreachable")


def decide_remote(query: str, rationale: str, endpoint: str | None = None, *,
                  client: httpx.Client | None = None, timeout: float = 30.0) -> DecisionLabel:
    endpoint = endpoint or os.environ.get("DQ_CLASSIFIER_URL")
    if not endpoint:
        raise DecisionError("no classifier endpoint configured (DQ_CLASSIFIER_URL)")
    own = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        resp = client.post(endpoint, json={"question": query, "rationale": rationale})
        resp.raise_for_status()
        payload = resp.json()
    except httpx.HTTPError as exc:
        raise ClassifierTransportError(f"classifier request failed: {exc}") from exc
    except ValueError as exc:
        raise InvalidLabelError("classifier returned non-JSON body") from exc
    finally:
        if own:
            client.close()
    label = payload.get("label") if isinstance(payload, dict) else None
    if not isinstance(label, str):
        raise InvalidLabelError(f"classifier response has no label: {payload!r}")
    try:
        return DecisionLabel(label.strip().upper())
    except ValueError:
        raise InvalidLabelError(f"classifier returned unknown label {label!r}") from None


# -- pluggable deciders ------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    label: DecisionLabel
    checklist: ConstraintChecklist | None = None


class Decider(Protocol):
    name: str

    def __call__(self, query: str, rationale: str) -> Decision: ...


class RuleBasedDecider:
    name = "rule"

    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def __call__(self, query: str, rationale: str) -> Decision:
        label, checklist = decide_rule_based(query, rationale, self.gateway)
        return Decision(label, checklist)


class DescriptiveDecider:
    name = "descriptive"

    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def __call__(self, query: str, rationale: str) -> Decision:
        return Decision(decide_descriptive(query, rationale, self.gateway))


class RemoteDecider:
    name = "remote"

    def __init__(self, endpoint: str | None = None, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.client = client

    def __call__(self, query: str, rationale: str) -> Decision:
        return Decision(decide_remote(query, rationale, self.endpoint, client=self.client))


def make_decider(kind: str, gateway: Gateway | None = None,
                 endpoint: str | None = None) -> Decider:
    if kind == "rule":
        return RuleBasedDecider(gateway)
    if kind == "descriptive":
        return DescriptiveDecider(gateway)
    if kind == "remote":
        return RemoteDecider(endpoint)
    raise ValueError(f"unknown decider {kind!r}; expected rule, descriptive or remote")
