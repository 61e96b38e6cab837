"""Shared fixtures: a small label space and matching embedding table."""

import numpy as np
import pytest

from gzlss.label_space import build_label_space, make_embedding_table


@pytest.fixture
def space():
    # 3 seen + 2 unseen, background ignored
    return build_label_space([1, 2, 3], [4, 5])


@pytest.fixture
def table(space):
    rng = np.random.default_rng(7)
    vecs = rng.standard_normal((space.num_classes, 4))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return make_embedding_table({c: vecs[i] for i, c in enumerate(space.all_ids)})
