"""Cutting a full model into client part, auxiliary head and server part."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .nn import LayeredModel, ShapeError, init_mlp


@dataclass
class ModelPartition:
    phi: LayeredModel
    h: LayeredModel
    theta: LayeredModel
    cut_index: int

    def __post_init__(self):
        q_c = self.phi.output_dim
        if not (self.theta.input_dim == q_c == self.h.input_dim):
            raise ShapeError(
                f"cut dimension mismatch: phi out {q_c}, theta in {self.theta.input_dim}, "
                f"h in {self.h.input_dim}"
            )
        if self.h.output_dim != self.theta.output_dim:
            raise ShapeError("auxiliary head and server part disagree on the class count")

    @property
    def q_c(self) -> int:
        return self.phi.output_dim

    @property
    def num_classes(self) -> int:
        return self.theta.output_dim

    def full_model(self) -> LayeredModel:
        return self.phi + self.theta


class ParamCounts(NamedTuple):
    phi: int
    h: int
    theta: int
    q_c: int
    q: int


@dataclass
class ModelSpec:
    """Shape of the dense network and where to cut it.

    ``cut_index`` indexes the flat layer list (activations count as layers),
    so with one hidden width the net is [dense, relu, dense] and cut 2 puts
    the first dense+relu on the client. ``h_hidden`` lists hidden widths of
    the auxiliary head; empty means a single affine layer.
    """

    input_dim: int
    num_classes: int
    hidden: Sequence[int] = (32, 32)
    cut_index: int = 2
    h_hidden: Sequence[int] = field(default_factory=tuple)

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.num_classes]


def split_model(w: LayeredModel, cut_index: int, h: LayeredModel) -> ModelPartition:
    """Split ``w`` into ``w[:cut_index]`` and ``w[cut_index:]`` and attach ``h``.

    ``w`` is left untouched; all returned segments own fresh arrays.
    """
    if not 0 < cut_index < len(w):
        raise ValueError(f"cut_index {cut_index} gives a degenerate split of a {len(w)}-layer model")
    phi = w.slice(0, cut_index)
    theta = w.slice(cut_index)
    if h.input_dim != phi.output_dim:
        raise ShapeError(f"auxiliary head expects {h.input_dim} inputs but the cut layer has {phi.output_dim}")
    return ModelPartition(phi, h.copy(), theta, cut_index)


def init_partition(spec: ModelSpec, rng: np.random.Generator) -> ModelPartition:
    """Draw the full model first and the head second, so ``w`` does not depend on the head shape."""
    w = init_mlp(spec.dims, rng)
    q_c = w.slice(0, spec.cut_index).output_dim
    h = init_mlp([q_c, *spec.h_hidden, spec.num_classes], rng)
    return split_model(w, spec.cut_index, h)


def param_counts(p: ModelPartition) -> ParamCounts:
    return ParamCounts(
        phi=p.phi.parameter_count,
        h=p.h.parameter_count,
        theta=p.theta.parameter_count,
        q_c=p.q_c,
        q=p.phi.input_dim,
    )
