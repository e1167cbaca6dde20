"""Desk-scale fused-modality network with hand-written backprop.

Three parameter groups:

* ``enc``  — two tanh affine layers mapping concat(image_features,
  question_embedding) to the joint representation h
* ``proj`` — two affine layers mapping h to a projection that is
  L2-normalized onto the unit sphere (used only by contrastive losses,
  dropped from exported models)
* ``cls``  — one affine layer mapping h to answer logits

The optimizer is Adam with gradient clipping and a warmup + staircase
learning-rate schedule. Each group keeps its own Adam step count because the
training schemes update groups on different subsets of iterations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

SAFE_NORM_EPS = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

GROUPS = ("enc", "proj", "cls")


@dataclass(frozen=True)
class NetDims:
    d_v: int
    d_q: int
    d_h: int
    d_z: int
    num_labels: int

    def __post_init__(self):
        for name in ("d_v", "d_q", "d_h", "d_z", "num_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _param_shapes(dims: NetDims) -> dict[str, tuple[int, ...]]:
    d_in = dims.d_v + dims.d_q
    return {
        "enc_w1": (dims.d_h, d_in),
        "enc_b1": (dims.d_h,),
        "enc_w2": (dims.d_h, dims.d_h),
        "enc_b2": (dims.d_h,),
        "proj_w1": (dims.d_h, dims.d_h),
        "proj_b1": (dims.d_h,),
        "proj_w2": (dims.d_z, dims.d_h),
        "proj_b2": (dims.d_z,),
        "cls_w": (dims.num_labels, dims.d_h),
        "cls_b": (dims.num_labels,),
    }


def group_of(param_name: str) -> str:
    return param_name.split("_", 1)[0]


@dataclass
class NetworkState:
    """Parameters plus Adam moments and step counters. Single-writer."""

    dims: NetDims
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_steps: dict[str, int] = field(default_factory=lambda: {g: 0 for g in GROUPS})
    iteration: int = 0
    projection_stripped: bool = False

    def param_names(self) -> list[str]:
        return list(_param_shapes(self.dims))

    def snapshot(self) -> "NetworkState":
        """Deep copy for read-only evaluation or trajectory comparisons."""
        return replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            adam_steps=dict(self.adam_steps),
        )


def init_state(dims: NetDims, rng: np.random.Generator) -> NetworkState:
    """Scaled-Gaussian weights (1/sqrt fan-in), zero biases and moments."""
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(dims).items():
        if name.endswith(("_b1", "_b2", "_b")):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = shape[1]
            params[name] = rng.normal(size=shape) / np.sqrt(fan_in)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return NetworkState(
        dims=dims,
        params=params,
        adam_m=zeros,
        adam_v={k: v.copy() for k, v in zeros.items()},
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    a1: np.ndarray
    h: np.ndarray
    p1: np.ndarray
    z_pre: np.ndarray
    z_norms: np.ndarray
    safe_rows: np.ndarray
    z: np.ndarray
    logits: np.ndarray


def forward_with_cache(
    state: NetworkState, image_features: np.ndarray, question_embeddings: np.ndarray,
) -> ForwardCache:
    dims = state.dims
    v = np.asarray(image_features, dtype=np.float64)
    q = np.asarray(question_embeddings, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != dims.d_v:
        raise ValueError(f"image features must have shape (K, {dims.d_v})")
    if q.ndim != 2 or q.shape[1] != dims.d_q:
        raise ValueError(f"question embeddings must have shape (K, {dims.d_q})")
    if v.shape[0] != q.shape[0]:
        raise ValueError("modalities disagree on batch size")
    p = state.params
    x = np.concatenate([v, q], axis=1)
    a1 = np.tanh(x @ p["enc_w1"].T + p["enc_b1"])
    h = np.tanh(a1 @ p["enc_w2"].T + p["enc_b2"])
    p1 = h @ p["proj_w1"].T + p["proj_b1"]
    z_pre = p1 @ p["proj_w2"].T + p["proj_b2"]
    norms = np.linalg.norm(z_pre, axis=1)
    safe = norms < SAFE_NORM_EPS
    z = np.empty_like(z_pre)
    if np.any(safe):
        # Degenerate projection output: emit the first basis vector instead
        # of dividing by ~0. Gradient through these rows is defined as zero.
        z[safe] = 0.0
        z[safe, 0] = 1.0
    ok = ~safe
    z[ok] = z_pre[ok] / norms[ok, None]
    logits = h @ p["cls_w"].T + p["cls_b"]
    return ForwardCache(
        x=x, a1=a1, h=h, p1=p1, z_pre=z_pre, z_norms=norms, safe_rows=safe,
        z=z, logits=logits)


def forward(
    state: NetworkState, image_features: np.ndarray, question_embeddings: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint representation h, unit projection z, and answer logits."""
    cache = forward_with_cache(state, image_features, question_embeddings)
    return cache.h, cache.z, cache.logits


def backward(
    state: NetworkState,
    cache: ForwardCache,
    dz: np.ndarray | None = None,
    dlogits: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Exact parameter gradients for the provided upstream gradients.

    ``dz`` drives the encoder and projection groups, ``dlogits`` the encoder
    and classifier; gradients for untouched groups are simply absent from the
    result, which is how training schemes keep the other head frozen.
    """
    if dz is None and dlogits is None:
        raise ValueError("need at least one upstream gradient")
    p = state.params
    grads: dict[str, np.ndarray] = {}
    dh = np.zeros_like(cache.h)
    if dz is not None:
        dz = np.asarray(dz, dtype=np.float64)
        if dz.shape != cache.z.shape:
            raise ValueError("dz shape mismatch")
        # Through z = z_pre/|z_pre|: dz_pre = (dz - z (z.dz)) / |z_pre|.
        radial = np.sum(cache.z * dz, axis=1, keepdims=True)
        dz_pre = (dz - cache.z * radial)
        ok = ~cache.safe_rows
        dz_pre[ok] /= cache.z_norms[ok, None]
        dz_pre[cache.safe_rows] = 0.0
        grads["proj_w2"] = dz_pre.T @ cache.p1
        grads["proj_b2"] = dz_pre.sum(axis=0)
        dp1 = dz_pre @ p["proj_w2"]
        grads["proj_w1"] = dp1.T @ cache.h
        grads["proj_b1"] = dp1.sum(axis=0)
        dh += dp1 @ p["proj_w1"]
    if dlogits is not None:
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != cache.logits.shape:
            raise ValueError("dlogits shape mismatch")
        grads["cls_w"] = dlogits.T @ cache.h
        grads["cls_b"] = dlogits.sum(axis=0)
        dh += dlogits @ p["cls_w"]
    dpre2 = dh * (1.0 - cache.h ** 2)
    grads["enc_w2"] = dpre2.T @ cache.a1
    grads["enc_b2"] = dpre2.sum(axis=0)
    da1 = dpre2 @ p["enc_w2"]
    dpre1 = da1 * (1.0 - cache.a1 ** 2)
    grads["enc_w1"] = dpre1.T @ cache.x
    grads["enc_b1"] = dpre1.sum(axis=0)
    return grads


def check_finite_grads(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(state: NetworkState, grads: dict[str, np.ndarray], lr: float) -> None:
    """One Adam update on exactly the parameters present in ``grads``.

    Step counters advance per parameter group, so a group skipped on this
    iteration keeps its bias correction (and its parameters) untouched.
    """
    bumped: set[str] = set()
    for name in state.param_names():
        if name not in grads:
            continue
        group = group_of(name)
        if group not in bumped:
            state.adam_steps[group] += 1
            bumped.add(group)
        t = state.adam_steps[group]
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        state.params[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to base_lr, then multiplicative staircase decay."""

    base_lr: float = 2e-4
    warmup_factor: float = 0.1
    warmup_iters: int = 4266
    decay_factor: float = 0.2
    decay_steps: tuple[int, ...] = (10665, 14931)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.warmup_factor <= 1:
            raise ValueError("warmup_factor must be in (0, 1]")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ValueError("decay_steps must be strictly increasing")

    def scaled_to(self, total_iters: int, reference_iters: int = 25000) -> "LrSchedule":
        """Shrink warmup/decay milestones proportionally to a shorter run."""
        ratio = total_iters / reference_iters
        return replace(
            self,
            warmup_iters=max(1, int(round(self.warmup_iters * ratio))),
            decay_steps=tuple(max(1, int(round(s * ratio))) for s in self.decay_steps),
        )


def lr_at(iteration: int, schedule: LrSchedule) -> float:
    """Learning rate for a 0-based optimizer-step index."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    s = schedule
    if s.warmup_iters > 0 and iteration < s.warmup_iters:
        frac = iteration / s.warmup_iters
        return s.base_lr * (s.warmup_factor + (1.0 - s.warmup_factor) * frac)
    lr = s.base_lr
    for step in s.decay_steps:
        if iteration >= step:
            lr *= s.decay_factor
    return lr


def backward_and_step(
    state: NetworkState,
    cache: ForwardCache,
    schedule: LrSchedule,
    iteration: int,
    dz: np.ndarray | None = None,
    dlogits: np.ndarray | None = None,
    clip_norm: float = 0.25,
) -> dict[str, np.ndarray]:
    """Backprop the given upstream gradients and apply one clipped Adam step.

    ``iteration`` is the 0-based optimizer-step index used for the schedule.
    Returns the (clipped) gradients that were applied.
    """
    grads = backward(state, cache, dz=dz, dlogits=dlogits)
    check_finite_grads(grads)
    clip_gradients(grads, clip_norm)
    adam_step(state, grads, lr_at(iteration, schedule))
    return grads


def strip_projection(state: NetworkState) -> NetworkState:
    """Exported-model view: projection head zeroed out and flagged dropped."""
    out = state.snapshot()
    for name in out.param_names():
        if group_of(name) == "proj":
            out.params[name][:] = 0.0
            out.adam_m[name][:] = 0.0
            out.adam_v[name][:] = 0.0
    out.adam_steps["proj"] = 0
    out.projection_stripped = True
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON manifest line, then raw little-endian float64
# buffers in manifest order. Deterministic bytes, exact round-trip.

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, state: NetworkState) -> None:
    names = state.param_names()
    arrays: list[tuple[str, np.ndarray]] = []
    for prefix, table in (("p", state.params), ("m", state.adam_m), ("v", state.adam_v)):
        for name in names:
            arrays.append((f"{prefix}:{name}", table[name]))
    manifest = {
        "format": "paracon-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dims": {
            "d_v": state.dims.d_v, "d_q": state.dims.d_q, "d_h": state.dims.d_h,
            "d_z": state.dims.d_z, "num_labels": state.dims.num_labels,
        },
        "iteration": state.iteration,
        "adam_steps": state.adam_steps,
        "projection_stripped": state.projection_stripped,
        "arrays": [{"name": key, "shape": list(arr.shape)} for key, arr in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> NetworkState:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        if manifest.get("format") != "paracon-checkpoint":
            raise ValueError(f"{path}: not a checkpoint file")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        dims = NetDims(**manifest["dims"])
        tables: dict[str, dict[str, np.ndarray]] = {"p": {}, "m": {}, "v": {}}
        for entry in manifest["arrays"]:
            prefix, name = entry["name"].split(":", 1)
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated array {entry['name']!r}")
            tables[prefix][name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    expected = set(_param_shapes(dims))
    for prefix, table in tables.items():
        if set(table) != expected:
            raise ValueError(f"{path}: checkpoint arrays do not match declared dims")
    return NetworkState(
        dims=dims,
        params=tables["p"],
        adam_m=tables["m"],
        adam_v=tables["v"],
        adam_steps={g: int(manifest["adam_steps"][g]) for g in GROUPS},
        iteration=int(manifest["iteration"]),
        projection_stripped=bool(manifest.get("projection_stripped", False)),
    )
