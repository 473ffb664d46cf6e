# app/autodiff/tensor_ops.py
"""
Flat parameter vectors and the differentiation primitives built on them.

All arithmetic is float64. Every call builds a fresh autograd graph from
detached copies of its inputs, so callers' tensors are never mutated and no
graph outlives the call. Hessian-vector products are reverse-over-reverse:
the gradient of the scalar <grad, v>.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple
import logging
import math

import torch

from app.core.errors import LayoutError, NumericalOverflowError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def to_tensor(data: Any) -> torch.Tensor:
    """Convert array-like data to a contiguous float64 tensor."""
    return torch.as_tensor(data, dtype=DTYPE).contiguous()


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    shape: Tuple[int, ...]

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class Layout:
    segments: Tuple[Segment, ...] = ()

    def __post_init__(self):
        cursor = 0
        names = set()
        for seg in self.segments:
            if seg.offset != cursor:
                raise LayoutError(
                    f"Segment '{seg.name}' starts at {seg.offset}, expected {cursor}",
                    details={"segment": seg.name},
                )
            if seg.length != math.prod(seg.shape):
                raise LayoutError(f"Segment '{seg.name}' length does not match its shape {seg.shape}")
            if seg.name in names:
                raise LayoutError(f"Duplicate segment name '{seg.name}'")
            names.add(seg.name)
            cursor = seg.stop

    @classmethod
    def from_shapes(cls, shapes: Sequence[Tuple[str, Tuple[int, ...]]]) -> "Layout":
        segments = []
        offset = 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            length = math.prod(shape)
            segments.append(Segment(name, offset, length, shape))
            offset += length
        return cls(tuple(segments))

    @property
    def total(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> List[str]:
        return [seg.name for seg in self.segments]

    def get(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise LayoutError(f"Unknown segment '{name}'", details={"available": self.names})

    def locate(self, index: int) -> Segment:
        for seg in self.segments:
            if seg.offset <= index < seg.stop:
                return seg
        raise LayoutError(f"Index {index} outside layout of length {self.total}")


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: torch.Tensor
    layout: Layout

    def __post_init__(self):
        if self.values.dim() != 1:
            raise LayoutError(f"ParamVector values must be 1-D, got shape {tuple(self.values.shape)}")
        if self.values.numel() != self.layout.total:
            raise LayoutError(
                f"ParamVector length {self.values.numel()} does not match layout length {self.layout.total}"
            )
        if self.values.dtype != DTYPE:
            raise LayoutError(f"ParamVector values must be float64, got {self.values.dtype}")

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(torch.zeros(layout.total, dtype=DTYPE), layout)

    @classmethod
    def single(cls, values: Any, name: str = "theta") -> "ParamVector":
        """One-segment vector; convenient for oracle problems."""
        t = to_tensor(values).reshape(-1)
        return cls(t, Layout.from_shapes([(name, (t.numel(),))]))

    @classmethod
    def empty(cls) -> "ParamVector":
        return cls(torch.zeros(0, dtype=DTYPE), Layout())

    def __len__(self) -> int:
        return self.layout.total

    def segment(self, name: str) -> torch.Tensor:
        seg = self.layout.get(name)
        return self.values[seg.offset:seg.stop].view(seg.shape)

    def items(self) -> Iterator[Tuple[Segment, torch.Tensor]]:
        for seg in self.layout.segments:
            yield seg, self.values[seg.offset:seg.stop]

    def with_values(self, values: torch.Tensor) -> "ParamVector":
        return ParamVector(values, self.layout)

    def clone(self) -> "ParamVector":
        return ParamVector(self.values.detach().clone(), self.layout)

    def require_same_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutError(
                "ParamVector layouts differ",
                details={"left": self.layout.names, "right": other.layout.names},
            )

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.require_same_layout(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.require_same_layout(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * scalar, self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout)

    def dot(self, other: "ParamVector") -> float:
        self.require_same_layout(other)
        return float(torch.dot(self.values, other.values))

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.values))

    def bitwise_equal(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and torch.equal(self.values, other.values)


class Arity(str, Enum):
    SINGLE = "single"
    COUPLED = "coupled"


ObjectiveFn = Callable[[ParamVector, Optional[ParamVector], Any], torch.Tensor]


@dataclass(frozen=True)
class Objective:
    """
    A twice-differentiable scalar function of (params, aux, batch).

    `params` is the differentiated vector. For coupled objectives `aux` holds
    the other parameter block (e.g. the head when differentiating the
    backbone) and is treated as a constant.
    """
    fn: ObjectiveFn
    arity: Arity = Arity.SINGLE
    layout: Optional[Layout] = None
    aux_layout: Optional[Layout] = None
    name: str = "objective"

    def swapped(self) -> "Objective":
        """The same function, differentiated with respect to the aux block."""
        if self.arity is not Arity.COUPLED:
            raise LayoutError(f"Objective '{self.name}' has no aux block to differentiate")
        fn = self.fn
        return Objective(
            fn=lambda params, aux, batch: fn(aux, params, batch),
            arity=Arity.COUPLED,
            layout=self.aux_layout,
            aux_layout=self.layout,
            name=f"{self.name}[aux]",
        )


def _check_inputs(obj: Objective, params: ParamVector, aux: Optional[ParamVector]) -> None:
    if obj.layout is not None and params.layout != obj.layout:
        raise LayoutError(
            f"Parameter layout does not match objective '{obj.name}'",
            details={"expected": obj.layout.names, "got": params.layout.names},
        )
    if obj.arity is Arity.COUPLED:
        if aux is None:
            raise LayoutError(f"Objective '{obj.name}' needs aux parameters")
        if obj.aux_layout is not None and aux.layout != obj.aux_layout:
            raise LayoutError(
                f"Aux layout does not match objective '{obj.name}'",
                details={"expected": obj.aux_layout.names, "got": aux.layout.names},
            )


def _check_finite(t: torch.Tensor, layout: Layout, what: str) -> None:
    if bool(torch.isfinite(t).all()):
        return
    bad = int(torch.nonzero(~torch.isfinite(t))[0, 0])
    seg = layout.locate(bad)
    raise NumericalOverflowError(f"Non-finite {what} in segment '{seg.name}'", segment=seg.name)


def _detached(pv: Optional[ParamVector], requires_grad: bool = False) -> Optional[ParamVector]:
    if pv is None:
        return None
    values = pv.values.detach().clone()
    if requires_grad:
        values.requires_grad_(True)
    return ParamVector(values, pv.layout)


def _grad_or_zeros(out: torch.Tensor, inputs: List[torch.Tensor], create_graph: bool = False) -> List[torch.Tensor]:
    if not out.requires_grad:
        return [torch.zeros_like(t) for t in inputs]
    grads = torch.autograd.grad(out, inputs, create_graph=create_graph, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for g, t in zip(grads, inputs)]


def _loss_tensor(obj: Objective, params: ParamVector, aux: Optional[ParamVector], batch: Any) -> torch.Tensor:
    loss = obj.fn(params, aux, batch)
    if loss.dim() != 0:
        raise LayoutError(f"Objective '{obj.name}' must return a scalar, got shape {tuple(loss.shape)}")
    return loss


def eval_loss(obj: Objective, params: ParamVector, batch: Any, aux: Optional[ParamVector] = None) -> float:
    _check_inputs(obj, params, aux)
    with torch.no_grad():
        loss = float(_loss_tensor(obj, _detached(params), _detached(aux), batch))
    if not math.isfinite(loss):
        raise NumericalOverflowError(f"Non-finite loss from objective '{obj.name}'", segment="<loss>")
    return loss


def grad(obj: Objective, params: ParamVector, batch: Any, aux: Optional[ParamVector] = None) -> ParamVector:
    """Gradient with respect to `params`; same layout as `params`."""
    _check_inputs(obj, params, aux)
    p = _detached(params, requires_grad=True)
    with torch.enable_grad():
        loss = _loss_tensor(obj, p, _detached(aux), batch)
        (g,) = _grad_or_zeros(loss, [p.values])
    g = g.detach()
    _check_finite(g, params.layout, "gradient")
    return ParamVector(g, params.layout)


def value_and_grads(
    obj: Objective, params: ParamVector, batch: Any, aux: Optional[ParamVector] = None
) -> Tuple[float, ParamVector, Optional[ParamVector]]:
    """Loss plus gradients for both parameter blocks from a single backward pass."""
    _check_inputs(obj, params, aux)
    p = _detached(params, requires_grad=True)
    a = _detached(aux, requires_grad=True)
    with torch.enable_grad():
        loss = _loss_tensor(obj, p, a, batch)
        inputs = [p.values] if a is None else [p.values, a.values]
        grads = _grad_or_zeros(loss, inputs)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalOverflowError(f"Non-finite loss from objective '{obj.name}'", segment="<loss>")
    g_params = grads[0].detach()
    _check_finite(g_params, params.layout, "gradient")
    g_aux = None
    if aux is not None:
        g_aux = grads[1].detach()
        _check_finite(g_aux, aux.layout, "gradient")
        g_aux = ParamVector(g_aux, aux.layout)
    return value, ParamVector(g_params, params.layout), g_aux


def hvp(
    obj: Objective, params: ParamVector, batch: Any, v: ParamVector, aux: Optional[ParamVector] = None
) -> ParamVector:
    """H·v for the Hessian of `obj` with respect to `params` (aux held fixed)."""
    params.require_same_layout(v)
    _check_inputs(obj, params, aux)
    p = _detached(params, requires_grad=True)
    direction = v.values.detach()
    with torch.enable_grad():
        loss = _loss_tensor(obj, p, _detached(aux), batch)
        (g,) = _grad_or_zeros(loss, [p.values], create_graph=True)
        inner = torch.dot(g, direction)
        (hv,) = _grad_or_zeros(inner, [p.values])
    hv = hv.detach()
    _check_finite(hv, params.layout, "Hessian-vector product")
    return ParamVector(hv, params.layout)


def finite_diff_grad(
    obj: Objective, params: ParamVector, batch: Any, eps: float, aux: Optional[ParamVector] = None
) -> ParamVector:
    """Central differences, entry i = (f(θ+εe_i) − f(θ−εe_i)) / 2ε."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = params.values.detach().clone()
    out = torch.zeros_like(base)
    for i in range(base.numel()):
        shifted = base.clone()
        shifted[i] = base[i] + eps
        f_plus = eval_loss(obj, params.with_values(shifted), batch, aux)
        shifted[i] = base[i] - eps
        f_minus = eval_loss(obj, params.with_values(shifted), batch, aux)
        out[i] = (f_plus - f_minus) / (2 * eps)
    return ParamVector(out, params.layout)


def finite_diff_hvp(
    obj: Objective, params: ParamVector, batch: Any, v: ParamVector, eps: float,
    aux: Optional[ParamVector] = None,
) -> ParamVector:
    """(grad(θ+εv) − grad(θ−εv)) / 2ε."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    plus = grad(obj, params + v * eps, batch, aux)
    minus = grad(obj, params - v * eps, batch, aux)
    return (plus - minus) * (1.0 / (2 * eps))


def relative_error(actual: ParamVector, expected: ParamVector) -> float:
    denom = max(expected.norm(), 1e-12)
    return (actual - expected).norm() / denom


def concat_norm(*vectors: ParamVector) -> float:
    return math.sqrt(sum(float(torch.dot(v.values, v.values)) for v in vectors))
