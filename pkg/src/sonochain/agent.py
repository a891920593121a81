"""Tool planning and chain execution.

A planner turns an instruction into tool steps; :func:`execute_chain` runs
those steps against one image, appending every observation to a per-image
:class:`Memory`, and finishes with a summary of the observations.

Planners are generators: they yield :class:`PlanStep` objects and receive the
rendered observation of each executed step via ``send()``. The rule planner
ignores what it is sent; the LLM planner feeds it back to the model.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Generator, Iterable, Protocol, Sequence

import requests

from .domain import ImageRecord
from .errors import BackendUnavailable, ChainOverrun, ConfigError, PlanError, ProtocolError, SonoChainError
from .inference import DEFAULT_TIMEOUT, Backend
from .regions import LayoutConfig, Raster, load_raster, split
from .tools import ToolContext, ToolObservation, ToolRegistry

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 8
MAX_TURNS = 16
LLM_KEY_ENV = "SONOCHAIN_LLM_KEY"
SYSTEM_PROMPT_ASSET = "react_system_v1.txt"

_IMAGE_REF = re.compile(r"[\w./\\~-]+\.(?:png|jpe?g|bmp|tiff?|gif|dcm)\b", re.IGNORECASE)

# (pattern, tool); matched case-insensitively on word boundaries.
DEFAULT_KEYWORDS: tuple[tuple[str, str], ...] = (
    ("probe", "probe_tool"),
    ("category", "category_tool"),
    ("description", "suspicious_description_tool"),
    ("describe", "suspicious_description_tool"),
    ("suspicious thing", "detection_tool"),
    ("detect", "detection_tool"),
    ("annotation", "ocr_tool"),
    ("text", "ocr_tool"),
)


@dataclass(frozen=True)
class Instruction:
    text: str
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise PlanError("instruction text is empty")

    @classmethod
    def from_text(cls, text: str, image_ref: str | None = None) -> "Instruction":
        """Build an instruction, filling a literal ``{image path}`` slot with
        ``image_ref`` or else extracting the first image-like path from ``text``."""
        if image_ref is not None and "{image path}" in text:
            text = text.replace("{image path}", image_ref)
        if image_ref is None:
            match = _IMAGE_REF.search(text)
            image_ref = match.group(0) if match else None
        return cls(text, image_ref)


@dataclass(frozen=True)
class PlanStep:
    tool: str
    image_ref: str | None = None


@dataclass
class Memory:
    session_id: str
    observations: list[ToolObservation] = field(default_factory=list)
    error: str | None = None

    def append(self, observation: ToolObservation) -> None:
        self.observations.append(observation)

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def summary(self) -> str:
        return "\n".join(obs.text for obs in self.observations)


@dataclass(frozen=True)
class ChatTurn:
    role: str  # system | user | assistant
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad chat role {self.role!r}")
        if not self.content:
            raise ValueError("chat turn content must be nonempty")


class ChatClient(Protocol):
    def complete(self, messages: Sequence[ChatTurn]) -> str: ...


class HttpChatClient:
    """POSTs ``{"messages": [...], "model": ...}``; expects ``{"content": ...}``."""

    def __init__(self, endpoint: str, model: str | None = None, api_key: str | None = None,
                 timeout: float = DEFAULT_TIMEOUT) -> None:
        if not endpoint:
            raise ConfigError("LLM endpoint is not configured")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(LLM_KEY_ENV)
        self.timeout = timeout

    def complete(self, messages: Sequence[ChatTurn]) -> str:
        body = {"messages": [{"role": m.role, "content": m.content} for m in messages]}
        if self.model:
            body["model"] = self.model
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = requests.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise BackendUnavailable(f"LLM endpoint {self.endpoint}: {type(exc).__name__}") from None
        if resp.status_code != 200:
            raise BackendUnavailable(f"LLM endpoint {self.endpoint}: HTTP {resp.status_code}")
        try:
            content = resp.json()["content"]
        except (ValueError, KeyError, TypeError):
            raise ProtocolError(f"LLM endpoint {self.endpoint}: response lacks 'content'") from None
        if not isinstance(content, str):
            raise ProtocolError("LLM 'content' is not a string")
        return content


class ScriptedChatClient:
    """Replays canned assistant replies; records every request it receives."""

    def __init__(self, replies: Iterable[str]) -> None:
        self._replies = list(replies)
        self.requests: list[list[ChatTurn]] = []

    def complete(self, messages: Sequence[ChatTurn]) -> str:
        self.requests.append(list(messages))
        if not self._replies:
            raise BackendUnavailable("scripted chat client has no replies left")
        return self._replies.pop(0)


PlanGenerator = Generator[PlanStep, str, None]


class RulePlanner:
    """Deterministic keyword dispatch; steps follow phrase order in the text."""

    def __init__(self, keywords: Sequence[tuple[str, str]] = DEFAULT_KEYWORDS) -> None:
        self.keywords = tuple(keywords)
        self._patterns = [(re.compile(rf"\b{re.escape(k)}", re.IGNORECASE), tool) for k, tool in self.keywords]

    def plan(self, instruction: Instruction, registry: ToolRegistry) -> list[PlanStep]:
        if not len(registry):
            raise PlanError("tool registry is empty")
        text = instruction.text
        if instruction.image_ref:
            text = text.replace(instruction.image_ref, " ")
        hits = []
        for pattern, tool in self._patterns:
            if tool not in registry:
                continue
            for match in pattern.finditer(text):
                hits.append((match.start(), tool))
        steps: list[PlanStep] = []
        for _, tool in sorted(hits):
            if all(s.tool != tool for s in steps):
                steps.append(PlanStep(tool, instruction.image_ref))
        if not steps:
            raise PlanError(f"no tool matches instruction {instruction.text!r}; candidates: {registry.names}")
        return steps

    def iter_steps(self, instruction: Instruction, registry: ToolRegistry) -> PlanGenerator:
        for step in self.plan(instruction, registry):
            yield step


_ACTION = re.compile(r"^\s*Action\s*:\s*(.+?)\s*$", re.MULTILINE)
_ACTION_INPUT = re.compile(r"^\s*Action\s+Input\s*:\s*(.*?)\s*$", re.MULTILINE)
_FINAL = re.compile(r"^\s*Final\s+Answer\s*:\s*(.*)", re.MULTILINE | re.DOTALL)


@dataclass(frozen=True)
class ParsedReply:
    action: str | None = None
    action_input: str | None = None
    final_answer: str | None = None


def parse_reply(text: str) -> ParsedReply | None:
    """Parse one assistant reply; ``None`` when it follows neither form."""
    final = _FINAL.search(text)
    if final:
        return ParsedReply(final_answer=final.group(1).strip())
    action = _ACTION.search(text)
    if not action:
        return None
    name = action.group(1).strip().strip("`'\"[]")
    if not name:
        return None
    inp = _ACTION_INPUT.search(text)
    return ParsedReply(action=name, action_input=inp.group(1).strip().strip("`'\"") if inp else None)


def load_system_prompt(registry: ToolRegistry, asset: str = SYSTEM_PROMPT_ASSET) -> str:
    template = resources.files("sonochain").joinpath("prompts", asset).read_text(encoding="utf-8")
    tools = "\n".join(f"- {s.name}: {s.description}" for s in registry.specs)
    return template.format(tools=tools, tool_names=", ".join(registry.names))


class LLMPlanner:
    """ReAct-style planner driven by a chat-completion client.

    A reply that cannot be parsed, or that names an unregistered tool, earns
    one reprompt with a format reminder; a second consecutive failure raises
    :class:`PlanError`. More than ``max_turns`` model calls raise
    :class:`ChainOverrun`.
    """

    def __init__(self, client: ChatClient, max_turns: int = MAX_TURNS) -> None:
        self.client = client
        self.max_turns = max_turns
        self.final_answer: str | None = None
        self.transcript: list[ChatTurn] = []

    def _ask(self, messages: list[ChatTurn]) -> str:
        if sum(1 for m in messages if m.role == "assistant") >= self.max_turns:
            raise ChainOverrun(f"LLM planner exceeded {self.max_turns} turns")
        reply = self.client.complete(list(messages))
        messages.append(ChatTurn("assistant", reply or "(empty)"))
        return reply or ""

    def iter_steps(self, instruction: Instruction, registry: ToolRegistry) -> PlanGenerator:
        messages = [
            ChatTurn("system", load_system_prompt(registry)),
            ChatTurn("user", instruction.text),
        ]
        self.transcript = messages
        self.final_answer = None
        while True:
            parsed, problem = None, None
            for attempt in range(2):
                parsed = parse_reply(self._ask(messages))
                if parsed is None:
                    problem = "reply did not contain an 'Action:' or 'Final Answer:' line"
                elif parsed.action is not None and parsed.action not in registry:
                    problem = f"unknown tool {parsed.action!r}"
                else:
                    problem = None
                    break
                if attempt == 0:
                    messages.append(ChatTurn("user", self._reminder(problem, registry)))
            if problem is not None:
                raise PlanError(f"LLM planner failed twice: {problem}")
            if parsed.final_answer is not None:
                self.final_answer = parsed.final_answer
                return
            observation = yield PlanStep(parsed.action, parsed.action_input or instruction.image_ref)
            messages.append(ChatTurn("user", f"Observation: {observation}"))

    @staticmethod
    def _reminder(problem: str, registry: ToolRegistry) -> str:
        return (
            f"Format error: {problem}. Reply with 'Action: <tool>' and 'Action Input: <image path>', "
            f"where <tool> is one of [{', '.join(registry.names)}], or with 'Final Answer: <summary>'."
        )


def execute_chain(
    instruction: Instruction,
    image: ImageRecord,
    planner,
    registry: ToolRegistry,
    backend: Backend,
    layout: LayoutConfig,
    *,
    raster: Raster | None = None,
    max_iterations: int = MAX_ITERATIONS,
    **tool_settings,
) -> tuple[Memory, str]:
    """Run one instruction against one image.

    On any failure the raised exception carries the partial memory as
    ``exc.memory`` with ``memory.error`` set.
    """
    memory = Memory(session_id=image.image_id)
    try:
        if raster is None:
            raster = load_raster(image.raster_ref)
        ctx = ToolContext(image.image_id, split(raster, layout), backend, **tool_settings)
        steps = planner.iter_steps(instruction, registry)
        try:
            step = next(steps)
        except StopIteration:
            raise PlanError("planner produced an empty plan") from None
        while True:
            if len(memory) >= max_iterations:
                raise ChainOverrun(f"chain exceeded {max_iterations} iterations")
            if step.tool not in registry:
                raise PlanError(f"plan names unknown tool {step.tool!r}; available: {registry.names}")
            observation = registry[step.tool](ctx)
            memory.append(observation)
            logger.debug("%s %s: %s", image.image_id, step.tool, observation.text)
            try:
                step = steps.send(observation.text)
            except StopIteration:
                break
    except SonoChainError as exc:
        memory.error = f"{type(exc).__name__}: {exc}"
        exc.memory = memory
        raise
    return memory, memory.summary()
