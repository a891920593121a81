import random

import numpy as np
import pytest

from sonochain.agent import (
    ChatTurn,
    Instruction,
    LLMPlanner,
    Memory,
    PlanStep,
    RulePlanner,
    ScriptedChatClient,
    execute_chain,
    parse_reply,
)
from sonochain.domain import ImageRecord
from sonochain.errors import ChainOverrun, PlanError, UnknownImage
from sonochain.inference import FixtureBackend, TaskId
from sonochain.regions import LayoutConfig, Raster
from sonochain.tools import ToolRegistry

from studykit import OVAL_CIRC_ANECHOIC, one_hot

THREE_PART = "Give me a probe information for the given image: p.png. Then, provide a category of image and description of it."
LAYOUT = LayoutConfig("t", {"main": (0.0, 0.0, 0.8, 1.0), "probe_mark": (0.8, 0.0, 1.0, 0.3), "ocr_strip": (0, 0, 0.5, 0.1)})
RASTER = Raster(np.zeros((20, 30), dtype=np.uint8))
IMAGE = ImageRecord("img_001", "p.png")


@pytest.fixture
def backend():
    table = {
        ("img_001", TaskId.PROBE): one_hot(4),
        ("img_001", TaskId.CATEGORY): [0.90, 0.05, 0.05],
        ("img_001", TaskId.OCR): "3cm",
        ("img_001", TaskId.DETECT): [],
    }
    for task in ("shape", "margin", "echo"):
        table[("img_001", TaskId(task))] = OVAL_CIRC_ANECHOIC[task]
    return FixtureBackend(table)


def run(planner, backend, instruction=THREE_PART, **kw):
    return execute_chain(Instruction.from_text(instruction), IMAGE, planner, ToolRegistry(), backend, LAYOUT,
                         raster=RASTER, **kw)


class TestRulePlanner:
    @pytest.mark.parametrize(
        "text, tools",
        [
            (THREE_PART, ["probe_tool", "category_tool", "suspicious_description_tool"]),
            ("What is the probe information of the given image: p.png", ["probe_tool"]),
            ("Is there any suspicious thing in the given image? p.png", ["detection_tool"]),
            ("Describe the lesion, then give the category. img.png", ["suspicious_description_tool", "category_tool"]),
            ("Read the annotation text of probe.png", ["ocr_tool"]),
        ],
    )
    def test_plans(self, text, tools):
        steps = RulePlanner().plan(Instruction.from_text(text), ToolRegistry())
        assert [s.tool for s in steps] == tools

    def test_image_ref_extracted(self):
        instruction = Instruction.from_text(THREE_PART)
        assert instruction.image_ref == "p.png"
        assert all(s.image_ref == "p.png" for s in RulePlanner().plan(instruction, ToolRegistry()))

    def test_image_path_slot(self):
        instruction = Instruction.from_text("What is the probe information of the given image: {image path}", "/x/y.png")
        assert instruction.text.endswith("/x/y.png") and instruction.image_ref == "/x/y.png"

    def test_no_match(self):
        with pytest.raises(PlanError, match="candidates"):
            RulePlanner().plan(Instruction.from_text("hello there"), ToolRegistry())

    def test_only_registered_tools(self):
        reg = ToolRegistry().subset(["category_tool"])
        steps = RulePlanner().plan(Instruction.from_text(THREE_PART), reg)
        assert [s.tool for s in steps] == ["category_tool"]


class TestExecuteChain:
    def test_three_step_chain(self, backend):
        memory, summary = run(RulePlanner(), backend)
        assert [o.tool for o in memory] == ["probe_tool", "category_tool", "suspicious_description_tool"]
        # probe one-hot at 4 -> right LOQ; category 0.90 benign >= 0.85 -> C2; lesion argmaxes -> oval/circumscribed/anechoic
        assert summary.split("\n") == [
            "The probe information of the given image is right Lower Outer Quadrant (LOQ).",
            "The category of the given image is C2 (benign).",
            "It appears oval shape, circumscribed margin and anechoic echo.",
        ]

    def test_deterministic(self, backend):
        assert run(RulePlanner(), backend)[1] == run(RulePlanner(), backend)[1]

    def test_empty_plan(self, backend):
        class Empty:
            def iter_steps(self, instruction, registry):
                return iter(())

        with pytest.raises(PlanError) as info:
            run(Empty(), backend)
        assert len(info.value.memory) == 0

    def test_iteration_cap(self, backend):
        with pytest.raises(ChainOverrun) as info:
            run(RulePlanner(), backend, max_iterations=2)
        assert [o.tool for o in info.value.memory] == ["probe_tool", "category_tool"]
        assert info.value.memory.error.startswith("ChainOverrun")

    def test_tool_error_keeps_partial_memory(self):
        partial = FixtureBackend({("img_001", TaskId.PROBE): one_hot(0)})
        with pytest.raises(UnknownImage) as info:
            run(RulePlanner(), partial)
        assert [o.tool for o in info.value.memory] == ["probe_tool"]
        assert "UnknownImage" in info.value.memory.error

    def test_unknown_planned_tool(self, backend):
        class Rogue:
            def iter_steps(self, instruction, registry):
                yield PlanStep("xray_tool")

        with pytest.raises(PlanError):
            run(Rogue(), backend)

    def test_memory_order_matches_random_plans(self, backend):
        rng = random.Random(7)
        names = ["probe_tool", "category_tool", "suspicious_description_tool", "detection_tool", "ocr_tool"]

        class Fixed:
            def __init__(self, tools):
                self.tools = tools

            def iter_steps(self, instruction, registry):
                for t in self.tools:
                    yield PlanStep(t)

        for _ in range(25):
            plan = rng.sample(names, rng.randint(1, 5))
            memory, summary = run(Fixed(plan), backend)
            assert [o.tool for o in memory] == plan
            assert summary.split("\n") == [o.text for o in memory]


def test_memory_summary():
    assert Memory("s").summary() == ""


class TestParseReply:
    def test_action(self):
        parsed = parse_reply("Thought: need probe\nAction: probe_tool\nAction Input: p.png")
        assert (parsed.action, parsed.action_input) == ("probe_tool", "p.png")

    def test_final(self):
        assert parse_reply("Thought: done\nFinal Answer: all good").final_answer == "all good"

    @pytest.mark.parametrize("text", ["", "I think the probe is left", "Action:   "])
    def test_garbage(self, text):
        assert parse_reply(text) is None


def llm(replies):
    client = ScriptedChatClient(replies)
    return LLMPlanner(client), client


class TestLLMPlanner:
    def test_valid_transcript(self, backend):
        planner, client = llm(["Action: probe_tool\nAction Input: p.png", "Final Answer: right LOQ"])
        memory, _ = run(planner, backend)
        assert [o.tool for o in memory] == ["probe_tool"]
        assert planner.final_answer == "right LOQ"
        system = client.requests[0][0]
        assert system.role == "system" and "probe_tool" in system.content and "ocr_tool" in system.content
        feedback = client.requests[1][-1]
        assert feedback == ChatTurn("user", "Observation: " + memory.observations[0].text)

    def test_garbage_twice(self, backend):
        planner, client = llm(["no idea", "still no idea", "Action: probe_tool"])
        with pytest.raises(PlanError) as info:
            run(planner, backend)
        assert len(info.value.memory) == 0
        assert len(client.requests) == 2
        assert "Format error" in client.requests[1][-1].content

    def test_malformed_then_valid(self, backend):
        planner, client = llm(["blah", "Action: category_tool", "Final Answer: C2"])
        memory, _ = run(planner, backend)
        assert [o.tool for o in memory] == ["category_tool"]

    def test_unknown_tool_then_corrected(self, backend):
        planner, client = llm(["Action: xray_tool", "Action: probe_tool", "Final Answer: done"])
        memory, _ = run(planner, backend)
        assert [o.tool for o in memory] == ["probe_tool"]
        assert "xray_tool" in client.requests[1][-1].content

    def test_unknown_tool_twice(self, backend):
        planner, _ = llm(["Action: xray_tool", "Action: ct_tool"])
        with pytest.raises(PlanError):
            run(planner, backend)

    def test_retry_is_per_reply(self, backend):
        planner, _ = llm(["junk", "Action: probe_tool", "junk", "Action: category_tool", "Final Answer: ok"])
        memory, _ = run(planner, backend)
        assert [o.tool for o in memory] == ["probe_tool", "category_tool"]

    def test_turn_budget(self, backend):
        client = ScriptedChatClient(["Action: probe_tool"] * 10)
        with pytest.raises(ChainOverrun):
            run(LLMPlanner(client, max_turns=3), backend)

    def test_iteration_cap_applies(self, backend):
        client = ScriptedChatClient(["Action: probe_tool"] * 20)
        with pytest.raises(ChainOverrun) as info:
            run(LLMPlanner(client), backend)
        assert len(info.value.memory) == 8

    def test_immediate_final_answer_is_empty_plan(self, backend):
        planner, _ = llm(["Final Answer: nothing to do"])
        with pytest.raises(PlanError):
            run(planner, backend)
