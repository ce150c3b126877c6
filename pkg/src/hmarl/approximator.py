"""Small differentiable networks with hand-written reverse-mode gradients.

Two building blocks cover every network in the package: a ReLU multi-layer
perceptron and a single-head self-attention block followed by layer
normalization and mean pooling. Each forward pass returns a :class:`Tape`
that :func:`backward` consumes exactly once. All arithmetic is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidCheckpoint, ProtocolViolation, UpdateRejected

CHECKPOINT_FORMAT = 1
LN_EPS = 1e-5


class ParamSet:
    """Named float64 tensors plus their Adam moments and step count."""

    def __init__(self, params: Mapping[str, np.ndarray]):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise InvalidArgument(f"parameter {k} has non-finite entries")
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step_count = 0

    def __getitem__(self, key: str) -> np.ndarray:
        return self.params[key]

    def keys(self):
        return self.params.keys()

    @property
    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.params.items()}

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ParamSet":
        out = ParamSet(self.params)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step_count = self.step_count
        return out

    def restore(self, other: "ParamSet") -> None:
        """Overwrite values, moments and step count from a snapshot."""
        for k in self.params:
            self.params[k][...] = other.params[k]
            self.m[k][...] = other.m[k]
            self.v[k][...] = other.v[k]
        self.step_count = other.step_count

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


@dataclass
class Tape:
    """Intermediate values of one forward pass."""

    kind: str
    values: dict = field(default_factory=dict)
    used: bool = False


# -- initialization ---------------------------------------------------------


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, final_scale: float = 1.0, extra: Mapping[str, np.ndarray] | None = None) -> ParamSet:
    """Fan-in scaled uniform weights, zero biases.

    Args:
        sizes: Layer widths from input to output, e.g. ``[9, 256, 256, 3]``.
        rng: Source of randomness.
        final_scale: Multiplier on the last layer's weights.
        extra: Additional named tensors stored in the same set (e.g. a log-std).
    """
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise InvalidArgument(f"invalid layer sizes {sizes}")
    params = {}
    n = len(sizes) - 1
    for i in range(n):
        bound = 1.0 / np.sqrt(sizes[i])
        w = rng.uniform(-bound, bound, size=(sizes[i], sizes[i + 1]))
        if i == n - 1:
            w = w * final_scale
        params[f"W{i}"] = w
        params[f"b{i}"] = np.zeros(sizes[i + 1])
    if extra:
        params.update(extra)
    return ParamSet(params)


def init_attention(d_in: int, d_model: int, rng: np.random.Generator) -> ParamSet:
    bound = 1.0 / np.sqrt(d_in)
    return ParamSet({
        "Wq": rng.uniform(-bound, bound, size=(d_in, d_model)),
        "Wk": rng.uniform(-bound, bound, size=(d_in, d_model)),
        "Wv": rng.uniform(-bound, bound, size=(d_in, d_model)),
        "gamma": np.ones(d_model),
        "beta": np.zeros(d_model),
    })


def mlp_depth(params: ParamSet) -> int:
    n = 0
    while f"W{n}" in params.params:
        n += 1
    return n


# -- forward passes ---------------------------------------------------------


def mlp_forward(params: ParamSet, x) -> tuple[np.ndarray, Tape]:
    """Affine layers with ReLU between them and a linear output.

    ``x`` may be a single vector or a ``(batch, features)`` matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    n = mlp_depth(params)
    if n == 0:
        raise InvalidArgument("parameter set holds no MLP layers")
    d_in = params["W0"].shape[0]
    if x.shape[-1] != d_in:
        raise InvalidArgument(f"input has {x.shape[-1]} features, network expects {d_in}")
    acts = [x]
    h = x
    for i in range(n):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        h = np.maximum(z, 0.0) if i < n - 1 else z
        acts.append(h)
    return h, Tape("mlp", {"acts": acts, "n": n})


def attention_forward(params: ParamSet, tokens) -> tuple[np.ndarray, Tape]:
    """Self-attention over tokens, layer norm per token, then mean pooling.

    Args:
        params: Holds ``Wq``, ``Wk``, ``Wv``, ``gamma`` and ``beta``.
        tokens: ``(n, d_in)`` or ``(batch, n, d_in)``.

    Returns:
        Pooled ``(d_model,)`` or ``(batch, d_model)`` features and the tape.
    """
    x = np.asarray(tokens, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] == 0:
        raise InvalidArgument(f"attention needs at least one token, got shape {np.shape(tokens)}")
    if x.shape[-1] != params["Wq"].shape[0]:
        raise InvalidArgument(f"tokens have {x.shape[-1]} features, block expects {params['Wq'].shape[0]}")
    d = params["Wq"].shape[1]
    scale = 1.0 / np.sqrt(d)
    q = x @ params["Wq"]
    k = x @ params["Wk"]
    v = x @ params["Wv"]
    s = np.einsum("bid,bjd->bij", q, k) * scale
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = np.einsum("bij,bjd->bid", a, v)
    mu = o.mean(axis=-1, keepdims=True)
    var = o.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (o - mu) * inv
    y = xhat * params["gamma"] + params["beta"]
    pooled = y.mean(axis=1)
    tape = Tape("attention", {"x": x, "q": q, "k": k, "v": v, "a": a, "o": o, "xhat": xhat, "inv": inv, "scale": scale, "single": single})
    return (pooled[0] if single else pooled), tape


# -- reverse passes ---------------------------------------------------------


def backward(tape: Tape, params: ParamSet, output_grad) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(output * output_grad)``.

    Returns:
        A dict of parameter gradients (same keys as the layers used) and the
        gradient with respect to the forward input.

    Raises:
        ProtocolViolation: if the tape was already consumed.
    """
    if tape.used:
        raise ProtocolViolation("tape already consumed by a previous backward pass")
    tape.used = True
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.kind == "mlp":
        return _mlp_backward(tape, params, g)
    if tape.kind == "attention":
        return _attention_backward(tape, params, g)
    raise InvalidArgument(f"unknown tape kind {tape.kind}")


def _mlp_backward(tape: Tape, params: ParamSet, g: np.ndarray):
    acts, n = tape.values["acts"], tape.values["n"]
    if g.shape != acts[-1].shape:
        raise InvalidArgument(f"output_grad shape {g.shape} does not match output {acts[-1].shape}")
    grads = {}
    for i in reversed(range(n)):
        if i < n - 1:
            g = g * (acts[i + 1] > 0)
        h = acts[i]
        if h.ndim == 1:
            grads[f"W{i}"] = np.outer(h, g)
            grads[f"b{i}"] = g.copy()
        else:
            grads[f"W{i}"] = h.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"W{i}"].T
    return grads, g


def _attention_backward(tape: Tape, params: ParamSet, g: np.ndarray):
    t = tape.values
    x, q, k, v, a, xhat, inv, scale = (t[n] for n in ("x", "q", "k", "v", "a", "xhat", "inv", "scale"))
    if t["single"]:
        g = g[None]
    n_tok = x.shape[1]
    dy = np.repeat(g[:, None, :], n_tok, axis=1) / n_tok
    grads = {"gamma": (dy * xhat).sum(axis=(0, 1)), "beta": dy.sum(axis=(0, 1))}
    dxhat = dy * params["gamma"]
    d = dxhat.shape[-1]
    do = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    dv = np.einsum("bij,bid->bjd", a, do)
    da = np.einsum("bid,bjd->bij", do, v)
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dq = np.einsum("bij,bjd->bid", ds, k)
    dk = np.einsum("bij,bid->bjd", ds, q)
    grads["Wq"] = np.einsum("bif,bid->fd", x, dq)
    grads["Wk"] = np.einsum("bif,bid->fd", x, dk)
    grads["Wv"] = np.einsum("bif,bid->fd", x, dv)
    dx = dq @ params["Wq"].T + dk @ params["Wk"].T + dv @ params["Wv"].T
    return grads, (dx[0] if t["single"] else dx)


# -- optimization -----------------------------------------------------------


def grad_norm(*grad_dicts: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for gd in grad_dicts for g in gd.values())))


def clip_grads(max_norm: float, *grad_dicts: dict[str, np.ndarray]) -> float:
    """Scale all gradients in place so their joint norm is at most ``max_norm``."""
    norm = grad_norm(*grad_dicts)
    if np.isfinite(norm) and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for gd in grad_dicts:
            for k in gd:
                gd[k] = gd[k] * factor
    return norm


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place.

    Keys missing from ``grads`` are treated as zero gradients.

    Raises:
        UpdateRejected: if any gradient is non-finite; nothing is modified.
    """
    for k, g in grads.items():
        if k not in params.params:
            raise InvalidArgument(f"gradient for unknown parameter {k}")
        if g.shape != params.params[k].shape:
            raise InvalidArgument(f"gradient {k} has shape {g.shape}, expected {params.params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise UpdateRejected(f"non-finite gradient for {k}")
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        params.m[k] = beta1 * params.m[k] + (1.0 - beta1) * g
        params.v[k] = beta2 * params.v[k] + (1.0 - beta2) * g * g
        p -= lr * (params.m[k] / c1) / (np.sqrt(params.v[k] / c2) + eps)


def all_finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, sets: Mapping[str, ParamSet], meta: Mapping | None = None,
                    extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write parameter sets, optimizer moments, JSON metadata and loose arrays to one ``.npz`` file."""
    arrays = {"__format__": np.array(CHECKPOINT_FORMAT), "__meta__": np.array(json.dumps(meta or {}, sort_keys=True))}
    for k, v in (extra or {}).items():
        arrays[f"__extra__/{k}"] = np.asarray(v)
    for name, ps in sets.items():
        if "/" in name:
            raise InvalidArgument(f"parameter set name {name!r} must not contain '/'")
        arrays[f"{name}/__step__"] = np.array(ps.step_count, dtype=np.int64)
        for k in ps.params:
            arrays[f"{name}/p/{k}"] = ps.params[k]
            arrays[f"{name}/m/{k}"] = ps.m[k]
            arrays[f"{name}/v/{k}"] = ps.v[k]
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, ParamSet], dict, dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`.

    Returns:
        ``(sets, meta, extra)``.

    Raises:
        InvalidCheckpoint: on a missing file, wrong format version or a
            malformed archive.
    """
    path = Path(path)
    if not path.is_file():
        raise InvalidCheckpoint(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise InvalidCheckpoint(f"{path}: unreadable checkpoint ({exc})") from None
    if "__format__" not in data or int(data["__format__"]) != CHECKPOINT_FORMAT:
        raise InvalidCheckpoint(f"{path}: unsupported checkpoint format")
    meta = json.loads(str(data.pop("__meta__")))
    data.pop("__format__")
    extra = {k.split("/", 1)[1]: data.pop(k) for k in list(data) if k.startswith("__extra__/")}
    grouped: dict[str, dict[str, dict]] = {}
    steps = {}
    for key, arr in data.items():
        parts = key.split("/", 2)
        if len(parts) == 2 and parts[1] == "__step__":
            steps[parts[0]] = int(arr)
            continue
        if len(parts) != 3 or parts[1] not in ("p", "m", "v"):
            raise InvalidCheckpoint(f"{path}: unexpected entry {key}")
        grouped.setdefault(parts[0], {"p": {}, "m": {}, "v": {}})[parts[1]][parts[2]] = arr
    sets = {}
    for name, g in grouped.items():
        ps = ParamSet(g["p"])
        if set(g["m"]) != set(g["p"]) or set(g["v"]) != set(g["p"]):
            raise InvalidCheckpoint(f"{path}: optimizer moments incomplete for {name}")
        ps.m = {k: np.array(v) for k, v in g["m"].items()}
        ps.v = {k: np.array(v) for k, v in g["v"].items()}
        ps.step_count = steps.get(name, 0)
        sets[name] = ps
    return sets, meta, extra
