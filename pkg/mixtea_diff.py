"""
Dense float64 tensor ops with reverse-mode differentiation.

Every op validates shapes and finiteness at its boundary and records itself on
the active GradientTape (if any). Gradients come from torch autograd; the tape
keeps the watched parameters and an ordered op log.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LEAKY_SLOPE = 0.2

_ACTIVE_TAPES: List["GradientTape"] = []


class DiffCoreError(ValueError):
    """Shape, value or usage error inside the tensor core."""


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: tuple


class GradientTape:
    """
    Computes gradients for watched parameters via torch autograd.

    `entries` is a shape trace of the ops run inside the context, kept for
    debugging only; gradients never read it.

    Usage:
        with GradientTape(params) as tape:
            loss = ...
        grads = tape.gradient(loss)
    """

    def __init__(self, params: Optional[Dict[str, torch.Tensor]] = None):
        self.params: Dict[str, torch.Tensor] = {}
        self.entries: List[TapeEntry] = []
        for name, tensor in (params or {}).items():
            self.watch(name, tensor)

    def watch(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.params[name] = tensor
        return tensor

    def record(self, op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor):
        self.entries.append(TapeEntry(op, tuple(tuple(t.shape) for t in inputs), tuple(output.shape)))

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def gradient(self, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
        return backward(loss, self.params)


def record_op(op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor) -> torch.Tensor:
    for tape in _ACTIVE_TAPES:
        tape.record(op, inputs, output)
    return output


def as_tensor(values, requires_grad: bool = False) -> torch.Tensor:
    """Build a 2-D float64 tensor; 1-D input becomes a single row."""
    t = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE).clone()
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.dim() != 2:
        raise DiffCoreError(f"expected 1-D or 2-D values, got shape {tuple(t.shape)}")
    _check_finite("as_tensor", t)
    return t.requires_grad_(requires_grad)


def _check_2d(op: str, *tensors: torch.Tensor):
    for t in tensors:
        if t.dim() != 2:
            raise DiffCoreError(f"{op}: expected 2-D tensor, got shape {tuple(t.shape)}")


def _check_finite(op: str, *tensors: torch.Tensor):
    for t in tensors:
        if not bool(torch.isfinite(t.detach()).all()):
            raise DiffCoreError(f"{op}: non-finite values in tensor of shape {tuple(t.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DiffCoreError(f"matmul: shape mismatch {tuple(a.shape)} x {tuple(b.shape)}")
    _check_finite("matmul", a, b)
    return record_op("matmul", (a, b), a @ b)


def row_softmax(a: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    if not temperature > 0:
        raise DiffCoreError(f"row_softmax: temperature must be > 0, got {temperature}")
    _check_2d("row_softmax", a)
    _check_finite("row_softmax", a)
    scaled = a / temperature
    shifted = scaled - scaled.max(dim=1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return record_op("row_softmax", (a,), e / e.sum(dim=1, keepdim=True))


def row_log_softmax(a: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    if not temperature > 0:
        raise DiffCoreError(f"row_log_softmax: temperature must be > 0, got {temperature}")
    _check_2d("row_log_softmax", a)
    _check_finite("row_log_softmax", a)
    return record_op("row_log_softmax", (a,), torch.log_softmax(a / temperature, dim=1))


def elu(a: torch.Tensor) -> torch.Tensor:
    _check_finite("elu", a)
    return record_op("elu", (a,), torch.nn.functional.elu(a))


def leaky_relu(a: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    _check_finite("leaky_relu", a)
    return record_op("leaky_relu", (a,), torch.nn.functional.leaky_relu(a, slope))


def concat_columns(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    if not parts:
        raise DiffCoreError("concat_columns: no parts")
    _check_2d("concat_columns", *parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DiffCoreError(f"concat_columns: row mismatch {sorted(rows)}")
    return record_op("concat_columns", parts, torch.cat(list(parts), dim=1))


def segment_mean(values: torch.Tensor, segment_ids: Sequence[Sequence[int]]) -> torch.Tensor:
    """
    Row i of the output is the mean of values[segment_ids[i]]; empty segment -> zero row.

    Repeated ids count repeatedly.
    """
    _check_2d("segment_mean", values)
    owners, rows = [], []
    for i, seg in enumerate(segment_ids):
        owners.extend([i] * len(seg))
        rows.extend(seg)
    return segment_mean_flat(values, np.asarray(owners, dtype=np.int64),
                             np.asarray(rows, dtype=np.int64), len(segment_ids))


def segment_mean_flat(values: torch.Tensor, owners: np.ndarray, rows: np.ndarray, num_segments: int) -> torch.Tensor:
    """segment_mean over flat (owner, row) incidence pairs."""
    _check_2d("segment_mean", values)
    if len(rows) and (rows.min() < 0 or rows.max() >= values.shape[0]):
        raise DiffCoreError(f"segment_mean: row id out of range [0, {values.shape[0]})")
    if len(owners) and (owners.min() < 0 or owners.max() >= num_segments):
        raise DiffCoreError(f"segment_mean: segment id out of range [0, {num_segments})")
    owner_t = torch.as_tensor(owners, dtype=torch.long)
    row_t = torch.as_tensor(rows, dtype=torch.long)
    sums = torch.zeros(num_segments, values.shape[1], dtype=values.dtype)
    sums = sums.index_add(0, owner_t, values.index_select(0, row_t))
    counts = torch.bincount(owner_t, minlength=num_segments).to(values.dtype).clamp(min=1.0)
    return record_op("segment_mean", (values,), sums / counts.unsqueeze(1))


class _RowL2(torch.autograd.Function):
    """Per-row Euclidean norm with subgradient 0 at the origin."""

    @staticmethod
    def forward(ctx, diff):
        norm = torch.sqrt((diff * diff).sum(dim=1, keepdim=True))
        ctx.save_for_backward(diff, norm)
        return norm

    @staticmethod
    def backward(ctx, grad_out):
        diff, norm = ctx.saved_tensors
        safe = torch.where(norm > 0, norm, torch.ones_like(norm))
        unit = torch.where(norm > 0, diff / safe, torch.zeros_like(diff))
        return grad_out * unit


def row_l2_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_2d("row_l2_distance", a, b)
    if a.shape != b.shape:
        raise DiffCoreError(f"row_l2_distance: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    _check_finite("row_l2_distance", a, b)
    return record_op("row_l2_distance", (a, b), _RowL2.apply(a - b))


def cosine_sim_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_2d("cosine_sim_matrix", a, b)
    if a.shape[1] != b.shape[1]:
        raise DiffCoreError(f"cosine_sim_matrix: column mismatch {a.shape[1]} vs {b.shape[1]}")
    _check_finite("cosine_sim_matrix", a, b)
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DiffCoreError("cosine_sim_matrix: zero-norm row")
    sims = (a / na) @ (b / nb).t()
    return record_op("cosine_sim_matrix", (a, b), sims.clamp(-1.0, 1.0))


def backward(loss: torch.Tensor, params: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """
    Gradients of a scalar loss w.r.t. each named parameter.

    Parameters the loss does not reach get a zero gradient of matching shape.
    """
    if loss.numel() != 1:
        raise DiffCoreError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    _check_finite("backward", loss)
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {n: (torch.zeros_like(t) if g is None else g.detach()) for n, t, g in zip(names, tensors, grads)}


@dataclass
class AdamState:
    """
    Adam moments for a named parameter set.

    Backed by torch.optim.Adam; moment tensors live in `optimizer.state`.
    """

    params: Dict[str, torch.Tensor]
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: torch.optim.Adam = field(init=False, repr=False)

    def __post_init__(self):
        for name, tensor in self.params.items():
            if not tensor.requires_grad:
                tensor.requires_grad_(True)
        self.optimizer = torch.optim.Adam(
            list(self.params.values()), lr=self.lr, betas=(self.beta1, self.beta2), eps=self.eps
        )

    @property
    def step_count(self) -> int:
        first = next(iter(self.params.values()))
        state = self.optimizer.state.get(first, {})
        step = state.get("step", 0)
        return int(step.item() if torch.is_tensor(step) else step)

    def moments(self, name: str):
        state = self.optimizer.state.get(self.params[name], {})
        return state.get("exp_avg"), state.get("exp_avg_sq")


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], state: AdamState) -> Dict[str, torch.Tensor]:
    """Apply one bias-corrected Adam update in place and return params."""
    for name, tensor in params.items():
        if name not in grads:
            raise DiffCoreError(f"adam_step: missing gradient for {name}")
        if grads[name].shape != tensor.shape:
            raise DiffCoreError(
                f"adam_step: gradient shape {tuple(grads[name].shape)} != parameter shape {tuple(tensor.shape)} for {name}"
            )
        if state.params.get(name) is not tensor:
            raise DiffCoreError(f"adam_step: parameter {name} is not tracked by this AdamState")
        _check_finite(f"adam_step[{name}]", grads[name])
        tensor.grad = grads[name].detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    return params


def xavier_init(rows: int, cols: int, seed: int) -> torch.Tensor:
    """Uniform in +-sqrt(6/(rows+cols)), seeded."""
    if rows <= 0 or cols <= 0:
        raise DiffCoreError(f"xavier_init: dims must be positive, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    gen = torch.Generator().manual_seed(int(seed))
    return torch.empty(rows, cols, dtype=DTYPE).uniform_(-bound, bound, generator=gen)
