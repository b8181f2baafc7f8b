"""Parameter storage, initialization, small layers and the AdamW optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, gelu, linear


class ParamStore:
    """Named parameters plus prefix aliases.

    An alias maps one path prefix onto another, so ``stage1/ffn/w1`` can
    resolve to the tensor stored under ``stage6/ffn/w1``. Aliased names are
    not separate parameters: they share storage and gradients.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._aliases: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def alias(self, prefix: str, target: str) -> None:
        self._aliases[prefix.rstrip("/")] = target.rstrip("/")

    @property
    def aliases(self) -> dict[str, str]:
        return dict(self._aliases)

    def resolve(self, name: str) -> str:
        head, _, rest = name.partition("/")
        if head in self._aliases:
            return self._aliases[head] + ("/" + rest if rest else "")
        return name

    def __getitem__(self, name: str) -> Tensor:
        key = self.resolve(name)
        try:
            return self._params[key]
        except KeyError:
            raise ConfigError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return self.resolve(name) in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in sorted(self._params)]

    def num_values(self, prefix: str | None = None) -> int:
        return sum(t.data.size for k, t in self._params.items() if prefix is None or k.startswith(prefix))

    def grad(self, name: str) -> np.ndarray:
        t = self[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self._params:
                raise ConfigError(f"unknown parameter {k!r}")
            if self._params[k].data.shape != v.shape:
                raise ConfigError(f"shape mismatch for {k!r}: {self._params[k].data.shape} vs {v.shape}")
            self._params[k].data = np.array(v, dtype=np.float64)


def init_linear(params: ParamStore, path: str, fan_in: int, fan_out: int, rng: np.random.Generator, scale: float = 1.0) -> None:
    bound = scale / np.sqrt(fan_in)
    params.add(f"{path}/w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    params.add(f"{path}/b", np.zeros(fan_out))


def init_mlp(
    params: ParamStore, path: str, dims: tuple[int, int, int], rng: np.random.Generator, out_scale: float = 1.0
) -> None:
    d_in, d_hidden, d_out = dims
    init_linear(params, f"{path}/l1", d_in, d_hidden, rng)
    init_linear(params, f"{path}/l2", d_hidden, d_out, rng, scale=out_scale)


def init_norm(params: ParamStore, path: str, d: int) -> None:
    params.add(f"{path}/g", np.ones(d))
    params.add(f"{path}/b", np.zeros(d))


def dense(x: Tensor, params: ParamStore, path: str) -> Tensor:
    return linear(x, params[f"{path}/w"], params[f"{path}/b"])


def mlp(x: Tensor, params: ParamStore, path: str) -> Tensor:
    """affine -> GELU -> affine."""
    return dense(gelu(dense(x, params, f"{path}/l1")), params, f"{path}/l2")


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def opt_step(params: ParamStore, state: OptimState) -> float:
    """One AdamW update with decoupled weight decay; clears gradients.

    Returns the pre-clip global gradient norm.
    """
    items = params.items()
    grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in items}
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    coef = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        coef = state.clip_norm / (norm + 1e-12)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for k, t in items:
        g = grads[k] * coef if coef != 1.0 else grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(t.data)
            state.v[k] = np.zeros_like(t.data)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            t.data *= 1.0 - state.lr * state.weight_decay
        t.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.grad = None
    return norm


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.worst < self.tol

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_err.items() if not e < self.tol]


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    tol: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = 24,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the report
    holds the max per parameter. The floor is raised to ``1e4`` times the
    rounding error of a central difference (``eps * |f| / h``) so that
    gradients that are zero up to roundoff do not read as mismatches. ``max_entries`` caps the number of probed
    entries per parameter (chosen at random) to keep large checks cheap.
    """
    rng = rng or np.random.default_rng(0)
    params.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ContractError("grad_check needs a scalar function")
    loss.backward()
    floor = max(floor, 1e4 * np.finfo(np.float64).eps * max(1.0, abs(float(loss.data))) / h)
    analytic = {k: params.grad(k).copy() for k, _ in params.items()}
    params.zero_grad()
    report: dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report[name] = worst
    params.zero_grad()
    return GradCheckReport(report, tol)
