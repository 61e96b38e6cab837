"""Hard pseudo-labels for unlabeled pixels, fused by consistency intersection.

A generator model predicts among unseen classes only (the unlabeled pixels
of a training mask are known not to be seen classes), once per augmented
view; the views are mapped back to original coordinates and a pixel keeps
its label only if every view agrees.  ``raw_st`` skips the filter and
``topp:<p>`` instead drops the least confident p% of assignments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gzlss import augmentation
from gzlss.label_space import EmbeddingTable, LabelSpace
from gzlss.model import BackboneParams, argmax_labels, forward_backbone, project_probs

STRICT = "strict"
RAW_ST = "raw_st"
TOP_P = "top_p"


def parse_strategy(text: str) -> tuple[str, float]:
    """Parse ``strict | raw_st | topp:<p>`` into (kind, p)."""
    token = text.strip()
    if token == STRICT:
        return STRICT, 0.0
    if token == RAW_ST:
        return RAW_ST, 0.0
    if token.startswith("topp:"):
        try:
            p = float(token[len("topp:"):])
        except ValueError as exc:
            raise ValueError(f"bad top-p percentage in {token!r}") from exc
        if not 0.0 <= p <= 100.0:
            raise ValueError(f"top-p percentage must be in [0, 100], got {p}")
        return TOP_P, p
    raise ValueError(f"unknown pseudo-label strategy: {token!r}")


def unlabeled_pixels(mask: np.ndarray) -> np.ndarray:
    """The boolean pixel set I = {(n, m) : mask == 0}."""
    return np.asarray(mask) == 0


@dataclass
class PseudoMask:
    """Unseen-class pseudo-labels (0 = none) with generation provenance."""

    labels: np.ndarray
    strategy: str
    spec_names: tuple[str, ...]
    generator_id: str = ""

    @property
    def num_augmentations(self) -> int:
        return len(self.spec_names)


def unseen_hard_labels(
    generator: BackboneParams,
    image: np.ndarray,
    spec: augmentation.AugmentationSpec,
    table: EmbeddingTable,
    space: LabelSpace,
    unlabeled: np.ndarray,
    generator_id: str = "",
) -> PseudoMask:
    """Argmax over unseen classes on one augmented view, mapped back to I."""
    if not space.unseen_ids:
        raise ValueError("label space has no unseen classes")
    image = np.asarray(image)
    view = augmentation.apply(spec, image)
    feat = forward_backbone(view, generator)
    hard = argmax_labels(feat, table, space.unseen_ids)
    labels = augmentation.invert_mask(spec, hard, image.shape[1:])
    labels = np.where(np.asarray(unlabeled, dtype=bool), labels, 0)
    return PseudoMask(labels, "hard", (spec.name(),), generator_id)


def consistency_intersect(masks: list[PseudoMask]) -> PseudoMask:
    """Keep a pixel's label only where every input mask agrees on it."""
    if not masks:
        raise ValueError("need at least one pseudo mask")
    labels = masks[0].labels.copy()
    for m in masks[1:]:
        if m.labels.shape != labels.shape:
            raise ValueError(
                f"pseudo mask shapes differ: {m.labels.shape} vs {labels.shape}"
            )
        labels = np.where(labels == m.labels, labels, 0)
    names = tuple(n for m in masks for n in m.spec_names)
    return PseudoMask(labels, STRICT, names, masks[0].generator_id)


def _top_p_filter(
    labels: np.ndarray, confidence: np.ndarray, unlabeled: np.ndarray, p: float
) -> np.ndarray:
    """Zero the lowest-confidence p% of assigned pixels (row-major tie order)."""
    flat = labels.copy().reshape(-1)
    idx = np.flatnonzero(unlabeled.reshape(-1))
    if idx.size == 0:
        return flat.reshape(labels.shape)
    n_drop = int(np.floor(p * idx.size / 100.0))
    if n_drop > 0:
        order = np.argsort(confidence.reshape(-1)[idx], kind="stable")
        flat[idx[order[:n_drop]]] = 0
    return flat.reshape(labels.shape)


def generate(
    strategy: str,
    generator: BackboneParams,
    image: np.ndarray,
    y: np.ndarray,
    specs: list[augmentation.AugmentationSpec],
    table: EmbeddingTable,
    space: LabelSpace,
    generator_id: str = "",
) -> PseudoMask:
    """Produce the pseudo-label mask for one image under a named strategy."""
    kind, p = parse_strategy(strategy)
    if not specs or specs[0].kind != augmentation.IDENTITY:
        raise ValueError("augmentation spec list must begin with identity")
    unlabeled = unlabeled_pixels(y)

    if kind == RAW_ST:
        out = unseen_hard_labels(
            generator, image, specs[0], table, space, unlabeled, generator_id
        )
        return PseudoMask(out.labels, RAW_ST, out.spec_names, generator_id)

    if kind == STRICT:
        views = [
            unseen_hard_labels(generator, image, spec, table, space, unlabeled, generator_id)
            for spec in specs
        ]
        return consistency_intersect(views)

    # top-p: assign the unseen argmax, rank by its probability under the
    # full seen+unseen softmax, drop the least confident p%
    feat = forward_backbone(np.asarray(image), generator)
    probs = project_probs(feat, table, space.all_ids)
    assigned = argmax_labels(feat, table, space.unseen_ids)
    rows, cols = np.indices(assigned.shape)
    confidence = probs.values[rows, cols, assigned - 1]  # dense ids: channel = id - 1
    labels = np.where(unlabeled, assigned, 0)
    labels = _top_p_filter(labels, confidence, unlabeled, p)
    return PseudoMask(labels, f"topp:{p:g}", (specs[0].name(),), generator_id)
