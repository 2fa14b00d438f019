from __future__ import annotations

import numpy as np
import pytest

from halmine.prompts import load_question_bank
from halmine.store import RunStore
from halmine.stubs import StubLayout, vector_to_image_bytes
from halmine.types import ObjectSpec


@pytest.fixture(scope="session")
def bank():
    return load_question_bank()


@pytest.fixture
def layout():
    return StubLayout()


@pytest.fixture
def leopard():
    return ObjectSpec("leopard", "imagenet")


@pytest.fixture
def run_store(tmp_path):
    return RunStore(tmp_path, "test-run", config={"seed": 0}, embedding_dim=24)


def make_stub_image(layout: StubLayout, *, hal: float = 0.0, obj: float = 0.0,
                    seed: int = 0) -> bytes:
    """A stub image with random semantic/perceptual blocks and set features."""
    rng = np.random.default_rng(seed)
    x = np.zeros(layout.image_dim)
    x[: layout.semantic_dim] = rng.normal(0.0, 1.0, layout.semantic_dim)
    x[layout.semantic_dim : layout.semantic_dim + layout.perceptual_dim] = rng.normal(
        0.0, 1.0, layout.perceptual_dim
    )
    x[layout.hal_index] = hal
    x[layout.obj_index] = obj
    return vector_to_image_bytes(x)
