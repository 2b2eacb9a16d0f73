"""Small fully connected regressor with hand-written reverse mode, Adam and EMA.

The same :class:`DenoiserNet` backs the teacher, the fake score model and the
student; only the preconditioning wrapped around it differs.  Inputs are a
batch of 2-D points, a scalar time feature per row and an integer class id per
row.  The time feature is divided by ``time_scale`` and expanded with fixed
sinusoids; the class id selects a learned embedding.  Everything is
concatenated and fed through ``depth`` SiLU layers.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError

Params = dict[str, np.ndarray]


def _sigmoid(z):
    # tanh form: overflow-free and much faster than a generic logistic
    return 0.5 + 0.5 * np.tanh(0.5 * z)


@dataclass(frozen=True)
class NetConfig:
    width: int = 128
    depth: int = 4
    class_dim: int = 16
    n_classes: int = 2
    n_freqs: int = 8
    time_scale: float = 250.0
    dtype: str = "float32"

    @property
    def in_dim(self) -> int:
        return 3 + 2 * self.n_freqs + self.class_dim


class DenoiserNet:
    def __init__(self, config: NetConfig | None = None, seed: int = 0, params: Params | None = None):
        self.config = config or NetConfig()
        self.freqs = (np.pi / 16.0) * 2.0 ** np.arange(self.config.n_freqs)
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator) -> Params:
        cfg = self.config
        dt = np.dtype(cfg.dtype)
        p: Params = {"class_embed": rng.standard_normal((cfg.n_classes, cfg.class_dim)).astype(dt)}
        fan_in = cfg.in_dim
        for k in range(cfg.depth):
            bound = 1.0 / np.sqrt(fan_in)
            p[f"w{k}"] = rng.uniform(-bound, bound, (fan_in, cfg.width)).astype(dt)
            p[f"b{k}"] = rng.uniform(-bound, bound, cfg.width).astype(dt)
            fan_in = cfg.width
        # zero head: the net starts as the zero map
        p["w_out"] = np.zeros((cfg.width, 2), dtype=dt)
        p["b_out"] = np.zeros(2, dtype=dt)
        return p

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(self.config, params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype: str) -> "DenoiserNet":
        cfg = NetConfig(**{**asdict(self.config), "dtype": dtype})
        return DenoiserNet(cfg, params={k: v.astype(dtype) for k, v in self.params.items()})

    def _features(self, x, time_feature, class_id):
        n = x.shape[0]
        tau = np.broadcast_to(np.asarray(time_feature, dtype=float), (n,)) / self.config.time_scale
        ang = tau[:, None] * self.freqs[None, :]
        cid = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (n,))
        if cid.size and (cid.min() < 0 or cid.max() >= self.config.n_classes):
            raise ValueError(f"class id out of range: {np.unique(cid)}")
        feat = np.concatenate(
            [x, tau[:, None], np.sin(ang), np.cos(ang), self.params["class_embed"][cid]], axis=1
        ).astype(self.dtype, copy=False)
        return feat, cid

    def forward(self, x, time_feature, class_id):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(time_feature)):
            raise NumericalError("non-finite network input")
        feat, cid = self._features(x, time_feature, class_id)
        p = self.params
        inputs, pre, sig = [], [], []
        h = feat
        for k in range(self.config.depth):
            inputs.append(h)
            z = h @ p[f"w{k}"] + p[f"b{k}"]
            s = _sigmoid(z)
            pre.append(z)
            sig.append(s)
            h = z * s
        out = h @ p["w_out"] + p["b_out"]
        return out, (inputs, pre, sig, h, cid)

    def __call__(self, x, time_feature, class_id) -> np.ndarray:
        return self.forward(x, time_feature, class_id)[0]

    def backward(self, cache, dout) -> tuple[Params, np.ndarray]:
        """Vector-Jacobian product: parameter gradients and d/dx for cotangent ``dout``."""
        inputs, pre, sig, h_last, cid = cache
        p = self.params
        dout = np.asarray(dout, dtype=self.dtype)
        grads: Params = {"w_out": h_last.T @ dout, "b_out": dout.sum(axis=0)}
        da = dout @ p["w_out"].T
        for k in reversed(range(self.config.depth)):
            z, s = pre[k], sig[k]
            dz = da * (s * (1.0 + z * (1.0 - s)))
            grads[f"w{k}"] = inputs[k].T @ dz
            grads[f"b{k}"] = dz.sum(axis=0)
            da = dz @ p[f"w{k}"].T
        d_embed = np.zeros_like(p["class_embed"])
        np.add.at(d_embed, cid, da[:, -self.config.class_dim:])
        grads["class_embed"] = d_embed
        return grads, da[:, :2]


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_scaled(acc: Params, other: Params, scale: float = 1.0) -> Params:
    for k, v in other.items():
        acc[k] = acc[k] + scale * v if k in acc else scale * v
    return acc


def flat(params: Params) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def param_hash(params: Params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


class Adam:
    """Adaptive-moment optimizer state for one network."""

    def __init__(self, params: Params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = zeros_like(params)
        self.v = zeros_like(params)
        self.step_count = 0

    def step(self, net: DenoiserNet, grads: Params) -> None:
        for name, g in grads.items():
            if name not in net.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != net.params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {net.params[name].shape} for {name!r}")
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        corr1 = 1.0 - b1**self.step_count
        corr2 = 1.0 - b2**self.step_count
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr:
                update = (self.lr / corr1) * m / (np.sqrt(v / corr2) + self.eps)
                net.params[name] -= update.astype(net.params[name].dtype, copy=False)

    def state(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "step": self.step_count}


def apply_gradients(net: DenoiserNet, grads: Params, opt: Adam) -> tuple[DenoiserNet, Adam]:
    opt.step(net, grads)
    return net, opt


class EmaTracker:
    """Shadow copy updated as ``shadow = decay * shadow + (1 - decay) * current``."""

    def __init__(self, net: DenoiserNet, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {decay}")
        self.decay = decay
        self.shadow = net.copy()

    def update(self, net: DenoiserNet) -> None:
        mu = self.decay
        for name, value in net.params.items():
            s = self.shadow.params[name]
            if s.shape != value.shape:
                raise ValueError(f"EMA shape mismatch for {name!r}: {s.shape} vs {value.shape}")
            if mu == 0.0:
                s[...] = value
            elif mu != 1.0:
                s *= mu
                s += (1.0 - mu) * value


# --- checkpoint archive -------------------------------------------------------
#
# Layout: MAGIC | u64 little-endian header length | JSON header | payload.
# header = {"tensors": {name: {shape, dtype, offset}}, "meta": {...}}
# Payload tensors are little-endian, at byte ``offset`` from payload start.

MAGIC = b"IBCDCKPT"
_DTYPE_TAGS = {"f32": "<f4", "f64": "<f8"}


def _tag(dtype: np.dtype) -> str:
    return {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}[np.dtype(dtype)]


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_archive(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = _tag(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": tag, "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + hlen])
    payload = memoryview(data)[start + hlen :]
    tensors = {}
    for name, e in header["tensors"].items():
        dt = np.dtype(_DTYPE_TAGS[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[name] = arr.astype(dt.newbyteorder("="))
    return tensors, header["meta"]


def save_net(path: str | Path, net: DenoiserNet, meta: dict | None = None, prefix: str = "") -> None:
    meta = dict(meta or {})
    meta.setdefault("net_config", asdict(net.config))
    save_archive(path, {prefix + k: v for k, v in net.params.items()}, meta)


def net_from_tensors(tensors: dict[str, np.ndarray], net_config: dict, prefix: str = "") -> DenoiserNet:
    cfg = NetConfig(**net_config)
    params = {k[len(prefix):]: v.copy() for k, v in tensors.items() if k.startswith(prefix)}
    net = DenoiserNet(cfg, params=params)
    expected = DenoiserNet(cfg, seed=0).params
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise ValueError(f"checkpoint tensor {prefix + k!r} missing or mis-shaped")
    return net


def load_net(path: str | Path, prefix: str = "") -> tuple[DenoiserNet, dict]:
    tensors, meta = load_archive(path)
    return net_from_tensors(tensors, meta["net_config"], prefix), meta
