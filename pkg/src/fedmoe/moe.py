"""Gate router and knowledge fusion across expert branches.

The gate reads the concatenated final-position representations of every
branch (local first, then the global branches in fixed domain-id
order), behind a stop-gradient so its training never disturbs expert
convergence. Fusion mixes the branch probability distributions with the
gate weights; by default those distributions are stop-gradiented too,
so the fusion loss trains the gate and nothing else.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError

EPS_FLOOR = 1e-12


@dataclasses.dataclass
class GateParams:
    """Softmax router over the experts visible in one domain.

    Zero-initialized so training starts at the uniform mixture. With
    hidden_dim == 0 it is a single linear map; otherwise one GELU hidden
    layer feeds a zero-initialized output layer.
    """

    weight: Parameter            # (num_experts * width, out) or (hidden, out)
    bias: Parameter
    hidden_weight: Parameter | None = None
    hidden_bias: Parameter | None = None

    @property
    def num_experts(self) -> int:
        return self.weight.data.shape[1]

    def parameters(self) -> list[Parameter]:
        params = [self.weight, self.bias]
        if self.hidden_weight is not None:
            params += [self.hidden_weight, self.hidden_bias]
        return params


def init_gate(num_experts: int, width: int, hidden_dim: int = 0,
              rng: np.random.Generator | None = None) -> GateParams:
    d_in = num_experts * width
    if hidden_dim:
        if rng is None:
            raise ValueError("hidden gate needs an rng for the hidden layer")
        return GateParams(
            weight=Parameter(np.zeros((hidden_dim, num_experts)), "gate.out"),
            bias=Parameter(np.zeros(num_experts), "gate.out_bias"),
            hidden_weight=Parameter(rng.normal(0.0, 0.02, (d_in, hidden_dim)), "gate.hidden"),
            hidden_bias=Parameter(np.zeros(hidden_dim), "gate.hidden_bias"),
        )
    return GateParams(
        weight=Parameter(np.zeros((d_in, num_experts)), "gate.out"),
        bias=Parameter(np.zeros(num_experts), "gate.out_bias"),
    )


def gate_forward(z_list: list[Tensor], gate: GateParams) -> Tensor:
    """Per-sample expert weights, shape (batch, num_experts).

    The concatenated representations are stop-gradiented: downstream
    gradients reach only the gate parameters.
    """
    if len(z_list) < 2:
        raise ShapeError(f"gate needs at least 2 experts, got {len(z_list)}")
    width = z_list[0].data.shape[-1]
    for z in z_list[1:]:
        if z.data.shape[-1] != width:
            raise ShapeError(
                f"gate input widths disagree: {z.data.shape[-1]} vs {width}")
    x = ad.stop_gradient(ad.concat_last(z_list))
    if gate.hidden_weight is not None:
        x = ad.gelu(ad.add(ad.matmul(x, gate.hidden_weight.tensor),
                           gate.hidden_bias.tensor))
    logits = ad.add(ad.matmul(x, gate.weight.tensor), gate.bias.tensor)
    return ad.softmax(logits, axis=-1)


def uniform_gate_weights(batch: int, num_experts: int) -> Tensor:
    """Fixed 1/D mixing used by the no-gate variant."""
    return Tensor(np.full((batch, num_experts), 1.0 / num_experts,
                          dtype=ad.get_default_dtype()))


@dataclasses.dataclass
class FusionOutput:
    mixture: Tensor       # (batch, num_items), rows sum to 1
    gate_weights: Tensor  # (batch, num_experts), rows sum to 1


def fuse(prob_list: list[Tensor], gate_weights: Tensor,
         train_experts: bool = False) -> FusionOutput:
    """Convex mixture of branch distributions under the gate weights.

    Branch distributions are stop-gradiented unless train_experts is
    set, so the fusion objective shapes only the gate.
    """
    n = prob_list[0].data.shape[-1]
    for p in prob_list[1:]:
        if p.data.shape[-1] != n:
            raise ShapeError(f"fuse: distribution lengths disagree: {p.data.shape[-1]} vs {n}")
    if gate_weights.data.shape[-1] != len(prob_list):
        raise ShapeError(
            f"fuse: {gate_weights.data.shape[-1]} gate columns for {len(prob_list)} experts")
    mixture = None
    for e, probs in enumerate(prob_list):
        if not train_experts:
            probs = ad.stop_gradient(probs)
        w = ad.reshape(ad.select(gate_weights, axis=-1, index=e), (-1, 1))
        term = ad.mul(w, probs)
        mixture = term if mixture is None else ad.add(mixture, term)
    return FusionOutput(mixture=mixture, gate_weights=gate_weights)


def moe_loss(fusion: FusionOutput, target_items) -> Tensor:
    """-log of the fused probability at the target item (ids are 1-based)."""
    targets = np.asarray(target_items, dtype=np.int64) - 1
    n = fusion.mixture.data.shape[-1]
    if targets.min() < 0 or targets.max() >= n:
        raise IndexError(f"moe_loss: target out of range [1, {n}]")
    picked = ad.take_along_last(fusion.mixture, targets)
    return ad.scale(ad.tmean(ad.tlog(ad.add(picked, Tensor(EPS_FLOOR)))), -1.0)
