"""Template and LLM-generated reasoning instructions.

Easy reasoning instructions name the object; hard ones describe its function
only and are rejected if they mention the category name or an alias.
"""

from __future__ import annotations

import json
import os
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .core import CategoryLabel, InstructionKind, InstructionSpec

TEMPLATE = "Please segment the affordance map of {name} in this image"

_SYSTEM_HEAD = (
    "You are a helpful assistant. Based on several words where the first is category name, "
    "please design an instruction <1> and instruction <2> in embodied scenes. "
)
_SYSTEM_TAIL = (
    "The instruction <2> must include object category name itself. "
    "The instruction <2> must belongs to embodied manipulation and give action if instruction <1> provides. "
    "The instruction <2>does not exceed 50 words."
)

SYSTEM_PROMPTS = {
    "easy": _SYSTEM_HEAD + "The instruction <1> must include object category name itself. " + _SYSTEM_TAIL,
    "hard": _SYSTEM_HEAD + "The instruction <1> must not include object category name itself. " + _SYSTEM_TAIL,
}

FEW_SHOT = {
    "easy": (
        ("mug", "<1> I need a drink. Please find a mug to fill water. <2> The mug has a handle as affordance map. So the robot can hold its handle."),
        ("knife", "<1> Please give me a knife to cut apple. <2> The knife has a handle, and you can use its handle to cut apple."),
        ("hammer", "<1> What is the proper way to hold the hammer? <2> The correct method is to hold the hammer by its handle."),
        ("fork", "<1> Kindly pick up the fork. <2> You will be holding the fork handle."),
        ("screwdriver", "<1> I need a tool to tighten or loosen screws. <2> The screwdriver is here, hold its handle to turn and control screws."),
    ),
    "hard": (
        ("microwave, open", "<1> Heat up food quickly . <2> The microwave is closed, so it can be open to access the food inside."),
        ("knife", "<1> I want to cut a bread. <2> The knife has a handle, you can use its handle to cut bread."),
        ("computer mouse", "<1> Give me a tool to control the cursor on the screen. <2> The computer mouse is here. It has not handle, so you can grasp its whole body."),
        ("fork", "<1> Use to pierce and lift food. <2> The fork is here, and its handle can be grasped."),
        ("screwdriver", "<1> I need a tool to tighten or loosen screws. <2> The screwdriver is here, hold its handle to turn and control screws."),
    ),
}  # fmt: skip


class InstructionError(ValueError):
    pass


class MarkerMissing(InstructionError):
    def __init__(self, which: str):
        super().__init__(f"response lacks marker {which}")
        self.which = which


class HardConstraintViolated(InstructionError):
    def __init__(self, offending: str):
        super().__init__(f"hard instruction names the object: {offending!r}")
        self.offending = offending


class EmptyInstruction(InstructionError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_json(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class PromptScaffold:
    mode: str
    messages: tuple[Message, ...]

    def to_json(self) -> list[dict]:
        return [m.to_json() for m in self.messages]


@dataclass(frozen=True)
class GeneratedInstructionPair:
    first: str
    second: str
    category: CategoryLabel
    mode: str

    def render(self) -> str:
        return f"<1> {self.first} <2> {self.second}"


@dataclass(frozen=True)
class HardCheck:
    passed: bool
    offending: str | None = None

    def __bool__(self) -> bool:
        return self.passed


def build_template(category: CategoryLabel) -> InstructionSpec:
    if not category.name.strip():
        raise ValueError("category name is empty")
    return InstructionSpec(InstructionKind.TEMPLATE, TEMPLATE.format(name=category.name))


def _check_mode(mode: str) -> str:
    if mode not in ("easy", "hard"):
        raise ValueError(f"mode must be 'easy' or 'hard', got {mode!r}")
    return mode


def build_reasoning_prompt(category: CategoryLabel, keywords: str | None, mode: str) -> PromptScaffold:
    mode = _check_mode(mode)
    msgs = [Message("system", SYSTEM_PROMPTS[mode])]
    for user, assistant in FEW_SHOT[mode]:
        msgs.append(Message("user", user))
        msgs.append(Message("assistant", assistant))
    words = category.name if not keywords else f"{category.name}, {keywords}"
    msgs.append(Message("user", words))
    return PromptScaffold(mode, tuple(msgs))


_WORD = re.compile(r"[^\W_]+")


def _words(text: str) -> list[str]:
    return _WORD.findall(text.casefold())


def check_hard_constraint(text: str, category: CategoryLabel) -> HardCheck:
    """Whole-word, case-insensitive search for the category name and aliases.

    Multi-word names must appear as a contiguous word sequence; words are
    maximal runs of letters and digits, so "mug's" contains "mug" but
    "demugging" does not.
    """
    words = _words(text)
    for phrase in (category.name, *category.aliases):
        target = _words(phrase)
        if not target:
            continue
        k = len(target)
        if any(words[i:i + k] == target for i in range(len(words) - k + 1)):
            return HardCheck(False, phrase)
    return HardCheck(True)


def parse_llm_pair(response: str, category: CategoryLabel, mode: str) -> GeneratedInstructionPair:
    mode = _check_mode(mode)
    i1 = response.find("<1>")
    if i1 < 0:
        raise MarkerMissing("<1>")
    i2 = response.find("<2>", i1 + 3)
    if i2 < 0:
        raise MarkerMissing("<2>")
    first = response[i1 + 3:i2].strip()
    second = response[i2 + 3:].strip()
    if not first or not second:
        raise EmptyInstruction("instruction <1> or <2> is empty")
    if mode == "hard":
        res = check_hard_constraint(first, category)
        if not res.passed:
            raise HardConstraintViolated(res.offending)
    return GeneratedInstructionPair(first, second, category, mode)


# --- LLM access --------------------------------------------------------------


class ChatClient(Protocol):
    def complete(self, model: str, messages: Sequence[dict]) -> str: ...


class OfflineStubClient:
    """Deterministic stand-in for a chat-completion service.

    ``responses`` maps the final user message to a canned reply (or a list of
    replies served round-robin). Unknown prompts get a generic reply built
    from the words, which names the object and therefore only passes easy
    mode.
    """

    def __init__(self, responses: dict[str, str | Sequence[str]] | None = None):
        self.responses = dict(responses or {})
        self.calls: list[list[dict]] = []
        self._lock = threading.Lock()
        self._served: Counter = Counter()

    def complete(self, model: str, messages: Sequence[dict]) -> str:
        words = messages[-1]["content"]
        with self._lock:
            self.calls.append(list(messages))
            reply = self.responses.get(words)
            if isinstance(reply, (list, tuple)):
                k = self._served[words]
                self._served[words] += 1
                return reply[k % len(reply)]
        if reply is not None:
            return reply
        name = words.split(",")[0].strip()
        return f"<1> Please bring me the {name}. <2> The {name} is here, grasp it firmly."


class HttpChatClient:
    """OpenAI-style chat-completion endpoint; key read from ``AFFORD_LLM_KEY``."""

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get("AFFORD_LLM_KEY")
        self.timeout = timeout

    def complete(self, model: str, messages: Sequence[dict]) -> str:
        from ._http import post_json

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        reply = post_json(self.endpoint, {"model": model, "messages": list(messages)}, headers=headers, timeout=self.timeout)
        try:
            return reply["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise InstructionError(f"unexpected chat-completion reply: {json.dumps(reply)[:200]}") from None


@dataclass
class GenerationResult:
    pairs: list[GeneratedInstructionPair] = field(default_factory=list)
    rejected: Counter = field(default_factory=Counter)  # (category, reason) -> count
    duplicates: Counter = field(default_factory=Counter)  # category -> count

    def counts(self) -> dict[str, int]:
        c = Counter(p.category.name for p in self.pairs)
        return dict(sorted(c.items()))


def generate_instructions(
    requests: Iterable[tuple[CategoryLabel, str | None]],
    mode: str,
    client: ChatClient,
    model: str = "gpt-4",
    samples_per_category: int = 1,
    max_in_flight: int = 4,
) -> GenerationResult:
    """Query the LLM for reasoning instructions and keep the valid, unique ones.

    Replies that fail to parse or break the hard-mode rule are discarded and
    counted. Output order follows the request order, so results do not
    depend on ``max_in_flight``.
    """
    mode = _check_mode(mode)
    jobs = []
    for cat, kw in requests:
        scaffold = build_reasoning_prompt(cat, kw, mode).to_json()
        jobs.extend((cat, scaffold) for _ in range(samples_per_category))

    def call(job):
        cat, scaffold = job
        try:
            return cat, client.complete(model, scaffold), None
        except Exception as e:  # a failed request only loses this sample
            return cat, None, f"request failed: {type(e).__name__}"

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        replies = list(pool.map(call, jobs))

    result = GenerationResult()
    seen: set[tuple[str, str]] = set()
    for cat, text, err in replies:
        if err is not None:
            result.rejected[(cat.name, "request_failed")] += 1
            continue
        try:
            pair = parse_llm_pair(text, cat, mode)
        except HardConstraintViolated:
            result.rejected[(cat.name, "hard_constraint")] += 1
            continue
        except InstructionError:
            result.rejected[(cat.name, "malformed")] += 1
            continue
        key = (cat.name, pair.first)
        if key in seen:
            result.duplicates[cat.name] += 1
            continue
        seen.add(key)
        result.pairs.append(pair)
    return result
