from __future__ import annotations

from pathlib import Path

import pytest

from prefpipe.gateway import Gateway, GatewayConfig, MockBackend, MockRule
from prefpipe.model import Instruction, Policy, Response, Turn

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def single_turn_instruction() -> Instruction:
    return Instruction.from_turns(
        [Turn("user", "What is the capital of France?")], source="demo"
    )


@pytest.fixture
def multi_turn_instruction() -> Instruction:
    return Instruction.from_turns(
        [
            Turn("user", "I'm planning a trip to Japan."),
            Turn("assistant", "Great choice! What would you like to know?"),
            Turn("user", "Which cities should I visit in spring?"),
        ],
        source="demo",
    )


def make_response(
    instruction: Instruction,
    model_id: str,
    text: str,
    policy: Policy = Policy.OFF,
    temperature: float = 0.0,
) -> Response:
    return Response.from_text(instruction.id, model_id, policy, text, temperature)


@pytest.fixture
def response_pair(single_turn_instruction):
    r1 = make_response(single_turn_instruction, "model-a", "Paris is the capital.", Policy.ON, 1.0)
    r2 = make_response(single_turn_instruction, "model-b", "The capital city is Paris.")
    return r1, r2


def gateway_for(backend: MockBackend, cache_dir=None, max_in_flight: int = 4) -> Gateway:
    config = GatewayConfig(
        max_in_flight=max_in_flight,
        cache_dir=None if cache_dir is None else str(cache_dir),
    )
    return Gateway(config, backend=backend)

