"""Parameter store, deterministic init, optimizers, and a finite-difference checker."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .tape import Tape, Var

_DOM_INIT = 21

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ParamStore:
    """Named float64 tensors with matching gradient accumulators."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.tensors[name] = np.asarray(values, dtype=float)
        self.grads[name] = np.zeros_like(self.tensors[name])

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParamStore":
        out = ParamStore(step_count=self.step_count)
        for name, t in self.tensors.items():
            out.tensors[name] = t.copy()
            out.grads[name] = self.grads[name].copy()
        return out


def init_params(seed: int, shapes: dict[str, tuple[int, ...]]) -> ParamStore:
    """Uniform init in +-1/sqrt(fan_in) per tensor, deterministic per seed."""
    lo, hi = seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((lo, hi, _DOM_INIT))))
    store = ParamStore()
    for name, shape in shapes.items():
        if any(d <= 0 for d in shape):
            raise ConfigError(f"non-positive dimension in {name!r}: {shape}")
        scale = 1.0 / np.sqrt(shape[-1])
        store.add(name, rng.uniform(-scale, scale, size=shape))
    return store


def wrap_params(store: ParamStore) -> dict[str, Var]:
    """Fresh Vars viewing the store's tensors, for one recorded forward pass."""
    return {name: Var(t) for name, t in store.tensors.items()}


def collect_grads(store: ParamStore, params: dict[str, Var]) -> None:
    """Accumulate gradients from a backward-swept parameter wrapping."""
    for name, var in params.items():
        if var.g is not None:
            store.grads[name] += var.g


def backward(tape: Tape, loss: Var, seed: float = 1.0) -> None:
    """Reverse sweep of a recorded forward trace from the scalar loss."""
    tape.backward([(loss, seed)])


@dataclass
class OptimizerState:
    kind: str = "adam"  # "sgd" | "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def step(store: ParamStore, opt: OptimizerState) -> None:
    """Apply one update from the accumulated gradients, then clear them."""
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in tensor {name!r}")
    if opt.kind == "sgd":
        for name, t in store.tensors.items():
            t -= opt.learning_rate * store.grads[name]
    else:
        opt.t += 1
        bc1 = 1.0 - opt.beta1 ** opt.t
        bc2 = 1.0 - opt.beta2 ** opt.t
        for name, t in store.tensors.items():
            g = store.grads[name]
            m = opt.m.setdefault(name, np.zeros_like(t))
            v = opt.v.setdefault(name, np.zeros_like(t))
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * g * g
            t -= opt.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    for name, t in store.tensors.items():
        if not np.all(np.isfinite(t)):
            raise DivergenceError(f"non-finite values in tensor {name!r} after update")
    store.zero_grads()
    store.step_count += 1


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckEntry:
    tensor: str
    rel_error: float
    index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    max_rel_error: float
    worst: list[GradCheckEntry]

    def failing_tensors(self) -> list[str]:
        return sorted({e.tensor for e in self.worst if e.rel_error >= self.tolerance})

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"gradcheck {status}: max rel error {self.max_rel_error:.3e} "
                 f"(tolerance {self.tolerance:.1e})"]
        for e in self.worst[:5]:
            lines.append(f"  {e.tensor}{list(e.index)}: analytic {e.analytic:.6e} "
                         f"numeric {e.numeric:.6e} rel {e.rel_error:.3e}")
        return "\n".join(lines)


def gradcheck(loss_fn, store: ParamStore, tolerance: float = 1e-4,
              h: float = 1e-5, max_params: int = 5000) -> GradCheckReport:
    """Compare analytic gradients with central differences, element by element.

    ``loss_fn(store, with_grad)`` returns the scalar loss; when ``with_grad``
    is true it must also accumulate gradients into the store.
    """
    if store.num_params() > max_params:
        raise ConfigError(f"gradcheck limited to {max_params} parameters, "
                          f"store has {store.num_params()}")
    store.zero_grads()
    loss_fn(store, True)
    analytic = {name: g.copy() for name, g in store.grads.items()}
    store.zero_grads()

    worst: list[GradCheckEntry] = []
    max_rel = 0.0
    for name, t in store.tensors.items():
        flat = t.ravel()
        a_flat = analytic[name].ravel()
        tensor_worst = None
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f1 = loss_fn(store, False)
            flat[i] = orig - h
            f2 = loss_fn(store, False)
            flat[i] = orig
            num = (f1 - f2) / (2.0 * h)
            rel = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), 1e-6)
            if tensor_worst is None or rel > tensor_worst.rel_error:
                tensor_worst = GradCheckEntry(
                    tensor=name, rel_error=rel,
                    index=np.unravel_index(i, t.shape),
                    analytic=float(a_flat[i]), numeric=float(num),
                )
        if tensor_worst is not None:
            worst.append(tensor_worst)
            max_rel = max(max_rel, tensor_worst.rel_error)
    worst.sort(key=lambda e: -e.rel_error)
    return GradCheckReport(passed=max_rel < tolerance, tolerance=tolerance,
                           max_rel_error=max_rel, worst=worst)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_payload(store: ParamStore, meta: dict) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": meta,
        "step_count": store.step_count,
        "tensors": {
            name: {"shape": list(t.shape), "values": t.ravel().tolist()}
            for name, t in store.tensors.items()
        },
    }


def save_checkpoint(path, store: ParamStore, meta: dict) -> None:
    with open(path, "w") as f:
        json.dump(checkpoint_payload(store, meta), f, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    from .errors import SchemaError

    with open(path) as f:
        payload = json.load(f)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise SchemaError(f"unsupported checkpoint format_version "
                          f"{payload.get('format_version')!r}")
    store = ParamStore(step_count=int(payload.get("step_count", 0)))
    for name, entry in payload["tensors"].items():
        store.add(name, np.array(entry["values"], dtype=float).reshape(entry["shape"]))
    return store, payload["meta"]
