"""Latent sampling and zeroth-order (forward-difference) input-gradient estimation.

The victim only answers queries, so the gradient of the disagreement loss with
respect to a generated image is split in two: the victim-dependent part is
estimated from loss differences along random unit directions,

    g_hat = D / (m * eps) * sum_i [f(x + eps * u_i) - f(x)] * u_i,

while the student-dependent part is differentiated exactly, since the
attacker owns the student.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import torch

from . import losses
from .models import Detection, StudentOutput
from .oracle import BudgetExhausted

LATENT_DISTRIBUTIONS = ("gaussian", "laplacian")


@dataclass
class EstimatorConfig:
    directions: int = 1  # m
    epsilon: float = 1e-3
    # "orthogonal": each image's m directions form a random orthonormal set
    # (blocks of D when m > D); "independent": i.i.d. uniform unit vectors.
    scheme: str = "orthogonal"

    def validate(self) -> None:
        if self.directions < 1:
            raise ValueError("need at least one direction")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.scheme not in ("orthogonal", "independent"):
            raise ValueError(f"unknown direction scheme {self.scheme!r}")


def sample_latent(batch: int, dim: int, dist: str = "gaussian", generator: torch.Generator | None = None) -> torch.Tensor:
    """I.i.d. standard normal or standard Laplace draws, shape ``(batch, dim)``."""
    if batch <= 0 or dim <= 0:
        raise ValueError("batch and dim must be positive")
    if dist == "gaussian":
        return torch.randn(batch, dim, generator=generator)
    if dist == "laplacian":
        # inverse CDF of Laplace(0, 1) from U(-1/2, 1/2)
        u = torch.rand(batch, dim, generator=generator, dtype=torch.float64) - 0.5
        u = u.clamp(-0.5 + 1e-12, 0.5 - 1e-12)
        return (-torch.sign(u) * torch.log1p(-2 * u.abs())).float()
    raise ValueError(f"unknown latent distribution {dist!r}")


def random_directions(n: int, m: int, dim: int, scheme: str = "orthogonal", generator: torch.Generator | None = None) -> torch.Tensor:
    """Unit directions of shape ``(n, m, dim)``; each one is marginally uniform on the sphere."""
    g = torch.randn(n, m, dim, generator=generator, dtype=torch.float64)
    if scheme == "independent" or m == 1:
        u = g
    else:
        blocks = []
        for start in range(0, m, dim):
            blk = g[:, start:start + dim, :].transpose(1, 2)  # (n, dim, k)
            q, r = torch.linalg.qr(blk)
            # sign fix makes q Haar-distributed
            q = q * torch.sign(torch.diagonal(r, dim1=1, dim2=2)).unsqueeze(1)
            blocks.append(q.transpose(1, 2))
        u = torch.cat(blocks, dim=1)
    return (u / u.norm(dim=2, keepdim=True)).float()


def forward_difference_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    cfg: EstimatorConfig,
    generator: torch.Generator | None = None,
    directions: torch.Tensor | None = None,
    bounds: tuple[float, float] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Estimate the per-image gradient of a black-box scalar function.

    ``fn`` maps a batch of points to one value per point and is called exactly
    once, on ``(m + 1) * B`` points laid out as ``[x, x + eps*u_1, ..., x + eps*u_m]``
    (direction-major). Returns ``(gradient shaped like x, f(x) per image)``.
    Perturbed points are clipped to ``bounds`` when given.
    """
    cfg.validate()
    b = x.shape[0]
    flat = x.detach().reshape(b, -1).float()
    dim = flat.shape[1]
    m = cfg.directions
    u = directions if directions is not None else random_directions(b, m, dim, cfg.scheme, generator)
    if u.shape != (b, m, dim):
        raise ValueError(f"directions must have shape {(b, m, dim)}, got {tuple(u.shape)}")
    pts = flat.unsqueeze(0) + cfg.epsilon * torch.cat([torch.zeros(1, b, dim), u.transpose(0, 1)])
    if bounds is not None:
        pts = pts.clamp(*bounds)
    values = fn(pts.reshape((m + 1) * b, *x.shape[1:])).reshape(m + 1, b).double()
    diffs = values[1:] - values[0]  # (m, b)
    grad = torch.einsum("mb,bmd->bd", diffs, u.double()) * (dim / (m * cfg.epsilon))
    return grad.float().reshape(x.shape), values[0].float()


class InputGradient(NamedTuple):
    grad: torch.Tensor  # d mean(l_total) / dx, shaped like x
    victim_part: torch.Tensor
    student_part: torch.Tensor
    loss: float  # batch-mean l_total at x
    victim: Detection  # victim answers on x (the un-perturbed batch)


def estimate_input_gradient(
    oracle,
    student: torch.nn.Module,
    x: torch.Tensor,
    cfg: EstimatorConfig,
    generator: torch.Generator | None = None,
    weights=(1.0, 1.0),
    mode: str = "prob",
) -> InputGradient:
    """Gradient of the batch-mean ``l_total(V(x), S(x))`` with respect to ``x``.

    Costs exactly ``(m + 1) * B`` victim image-queries, all submitted in a
    single request; the budget is checked up front so an estimate is either
    complete or not attempted.
    """
    cfg.validate()
    b = x.shape[0]
    cost = (cfg.directions + 1) * b
    left = oracle.remaining()
    if left < cost:
        raise BudgetExhausted(cost, left)

    x = x.detach()
    x_req = x.clone().requires_grad_(True)
    s_out: StudentOutput = student(x_req)
    s_fixed = StudentOutput(*(t.detach() for t in s_out))
    answers: dict[str, Detection] = {}

    def victim_loss(points: torch.Tensor) -> torch.Tensor:
        det = oracle.query(points)
        answers["det"] = det
        reps = points.shape[0] // b
        s_rep = StudentOutput(*(t.repeat(reps, 1) for t in s_fixed))
        return losses.per_sample_total(det, s_rep, weights, mode)

    victim_grad, base = forward_difference_gradient(victim_loss, x, cfg, generator, bounds=(0.0, 1.0))
    victim_grad = victim_grad / b
    v_base = Detection(answers["det"].probs[:b], answers["det"].box[:b])

    l_total = losses.per_sample_total(v_base, s_out, weights, mode).mean()
    (student_grad,) = torch.autograd.grad(l_total, x_req)
    return InputGradient(victim_grad + student_grad, victim_grad, student_grad, l_total.item(), v_base)


def generator_backprop(generator: torch.nn.Module, z: torch.Tensor, input_gradient: torch.Tensor, x: torch.Tensor | None = None) -> list[torch.Tensor]:
    """Chain an input gradient through the generator (vector-Jacobian product).

    Fills ``p.grad`` with ``J^T input_gradient`` for every parameter and
    returns those gradients. Pass ``x`` when ``generator(z)`` was already
    computed with autograd enabled.
    """
    if x is None:
        x = generator(z)
    if x.shape != input_gradient.shape:
        raise ValueError(f"gradient shape {tuple(input_gradient.shape)} != generator output {tuple(x.shape)}")
    params = [p for p in generator.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    x.backward(input_gradient.to(x.dtype))
    return [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
