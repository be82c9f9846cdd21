"""Neural building blocks, AdamW, and the parameter checkpoint format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import BadMagicError, BadVersionError, ContractViolation, ConfigurationError, GridIOError, TruncatedFileError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"VNWT"
CHECKPOINT_VERSION = 1


class Module:
    """Container whose ``Tensor``/``Module`` attributes form a parameter tree."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ConfigurationError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.data.shape != arr.shape:
                raise ConfigurationError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())


def param(shape, rng: np.random.Generator | None = None, scale: float = 0.0) -> Tensor:
    if rng is None or scale == 0.0:
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, bias: bool = True):
        self.weight = param((d_in, d_out), rng, 1.0 / math.sqrt(d_in))
        self.bias = param((d_out,)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ContractViolation(f"Linear expects width {self.d_in}, got {x.shape[-1]}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


def multi_head_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    heads: int,
    wq: Tensor, bq: Tensor,
    wk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    key_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with per-head projections.

    ``Q`` is ``[..., nq, d]``, ``K``/``V`` are ``[..., nk, d]``; leading
    dimensions broadcast. ``key_mask`` (bool ``[..., nk]``) hides padded keys.
    """
    d = Q.shape[-1]
    if d % heads:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    if K.shape[-2] < 1:
        raise ContractViolation("attention needs at least one key")
    dh = d // heads

    def split(x: Tensor) -> Tensor:
        x = x.reshape(x.shape[:-1] + (heads, dh))
        return T.swapaxes(x, -2, -3)  # [..., H, n, dh]

    q = split(Q @ wq + bq)
    k = split(K @ wk)
    v = split(V @ wv + bv)
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    attn = T.softmax(scores, mask)
    ctx = T.swapaxes(attn @ v, -2, -3)
    ctx = ctx.reshape(ctx.shape[:-2] + (d,))
    out = ctx @ wo + bo
    if return_weights:
        return out, attn
    return out


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator | None = None):
        if d % heads:
            raise ConfigurationError(f"width {d} not divisible by {heads} heads")
        s = 1.0 / math.sqrt(d)
        self.wq, self.bq = param((d, d), rng, s), param((d,))
        # no key bias: it shifts every score of a query equally, so softmax ignores it
        self.wk = param((d, d), rng, s)
        self.wv, self.bv = param((d, d), rng, s), param((d,))
        self.wo, self.bo = param((d, d), rng, s), param((d,))
        self.d, self.heads = d, heads

    def __call__(self, Q, K, V, key_mask=None, return_weights=False):
        return multi_head_attention(
            Q, K, V, self.heads,
            self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo,
            key_mask=key_mask, return_weights=return_weights,
        )


class PsiBlock(Module):
    """Two-layer GELU MLP whose output is added to a separate residual input."""

    def __init__(self, d: int, rng: np.random.Generator | None = None):
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.d = d

    def __call__(self, x: Tensor, residual: Tensor) -> Tensor:
        if x.shape[-1] != self.d or residual.shape[-1] != self.d:
            raise ContractViolation(f"psi block width {self.d}: got {x.shape[-1]} and {residual.shape[-1]}")
        return self.fc2(T.gelu(self.fc1(x))) + residual


class LSTMCell(Module):
    """Gate order in the fused weight: input, forget, candidate, output."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator | None = None):
        self.w_x = param((d_in, 4 * d_hidden), rng, 1.0 / math.sqrt(d_in))
        self.w_h = param((d_hidden, 4 * d_hidden), rng, 1.0 / math.sqrt(d_hidden))
        self.bias = param((4 * d_hidden,))
        self.d_in, self.d_hidden = d_in, d_hidden

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d_hidden or c.shape[-1] != self.d_hidden:
            raise ContractViolation(
                f"lstm expects input {self.d_in}/hidden {self.d_hidden}, got {x.shape[-1]}/{h.shape[-1]}/{c.shape[-1]}"
            )
        z = x @ self.w_x + h @ self.w_h + self.bias
        n = self.d_hidden
        i = T.sigmoid(z[..., 0:n])
        f = T.sigmoid(z[..., n:2 * n])
        g = T.tanh(z[..., 2 * n:3 * n])
        o = T.sigmoid(z[..., 3 * n:4 * n])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new


# -- optimizer --------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Tensor], state: AdamWState) -> None:
    """Decoupled weight decay Adam update, in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractViolation("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            raise ContractViolation(f"parameter {p.name or p.shape} has no gradient")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr == 0.0:
            continue
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 4e-5, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def step(self) -> None:
        adamw_step(self.params, self.state)


# -- checkpoints ---------------------------------------------------------------------------

def save_checkpoint(path, named: dict[str, np.ndarray] | Module) -> None:
    if isinstance(named, Module):
        named = named.state_dict()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TruncatedFileError("checkpoint shorter than header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise TruncatedFileError("name runs past end of file")
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            end = pos + 8 * count
            if end > len(data):
                raise TruncatedFileError(f"payload of {name} truncated")
            out[name] = np.frombuffer(data[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise TruncatedFileError(str(exc)) from exc
    except UnicodeDecodeError as exc:
        raise GridIOError(f"corrupt parameter name: {exc}") from exc
    return out
