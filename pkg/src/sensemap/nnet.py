"""Local map predictor: a conv encoder/decoder fused with a patch transformer.

Parameters live in a plain ``dict[str, torch.Tensor]`` and ``forward`` is a
pure function of (config, params, input), so gradients come from
``torch.autograd`` and checkpoints are simple name -> array maps.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .gridmap import FREE, OBSTACLE, UNCERTAIN, LocalPatch, MapDomainError, ProbMap, TrinaryMap, crop_window

NetParams = dict[str, torch.Tensor]


class ShapeError(ValueError):
    pass


class CheckpointError(IOError):
    pass


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class NetConfig:
    side: int = 64
    base: int = 16
    patch: int = 8
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        if self.side % 16:
            raise ShapeError(f"side {self.side} must be divisible by 16")
        if not _pow2(self.patch) or self.side % self.patch:
            raise ShapeError(f"patch {self.patch} must be a power of two dividing side {self.side}")
        if self.base < 1 or self.depth < 0 or self.heads < 1 or self.mlp_ratio < 1:
            raise ShapeError("base, heads and mlp_ratio must be >= 1, depth >= 0")
        if self.embed_dim % self.heads or self.embed_dim % 4:
            raise ShapeError(f"embed dim {self.embed_dim} must be divisible by heads and by 4")
        if self.dtype not in ("float64", "float32"):
            raise ShapeError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def embed_dim(self) -> int:
        return 8 * self.base

    @property
    def grid(self) -> int:
        return self.side // self.patch

    @property
    def tokens(self) -> int:
        return self.grid**2

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def channels(self, k: int) -> int:
        return self.base * 2**k

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "NetConfig":
        return cls(**d)


def _bridge_plan(cfg: NetConfig, k: int) -> tuple[str, int]:
    """How token-grid part k reaches skip k's resolution: ('up'|'same'|'down', layer count)."""
    res = cfg.side // 2**k
    g = cfg.grid
    if res > g:
        return "up", int(math.log2(res // g))
    if res == g:
        return "same", 1
    return "down", int(math.log2(g // res))


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape for every parameter tensor of the network."""
    b, d, p = cfg.base, cfg.embed_dim, cfg.patch
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for k in range(4):
        c = cfg.channels(k)
        shapes[f"enc{k}.conv.w"] = (c, cin, 3, 3)
        shapes[f"enc{k}.conv.b"] = (c,)
        shapes[f"enc{k}.down.w"] = (c, c, 3, 3)
        shapes[f"enc{k}.down.b"] = (c,)
        cin = c
    shapes["patch.w"] = (d, 3 * p * p)
    shapes["patch.b"] = (d,)
    shapes["pos"] = (cfg.tokens, d)
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        shapes[f"blk{i}.ln1.g"] = (d,)
        shapes[f"blk{i}.ln1.b"] = (d,)
        shapes[f"blk{i}.qkv.w"] = (3 * d, d)
        shapes[f"blk{i}.qkv.b"] = (3 * d,)
        shapes[f"blk{i}.proj.w"] = (d, d)
        shapes[f"blk{i}.proj.b"] = (d,)
        shapes[f"blk{i}.ln2.g"] = (d,)
        shapes[f"blk{i}.ln2.b"] = (d,)
        shapes[f"blk{i}.fc1.w"] = (hidden, d)
        shapes[f"blk{i}.fc1.b"] = (hidden,)
        shapes[f"blk{i}.fc2.w"] = (d, hidden)
        shapes[f"blk{i}.fc2.b"] = (d,)
    part = d // 4
    for k in range(4):
        c = cfg.channels(k)
        kind, n = _bridge_plan(cfg, k)
        cin = part
        for j in range(n):
            if kind == "up":
                shapes[f"bridge{k}.{j}.w"] = (cin, c, 2, 2)  # transposed conv layout
            elif kind == "same":
                shapes[f"bridge{k}.{j}.w"] = (c, cin, 1, 1)
            else:
                shapes[f"bridge{k}.{j}.w"] = (c, cin, 2, 2)
            shapes[f"bridge{k}.{j}.b"] = (c,)
            cin = c
    cin = cfg.channels(3)
    for k in (3, 2, 1, 0):
        c = cfg.channels(k)
        shapes[f"dec{k}.up.w"] = (cin, c, 2, 2)
        shapes[f"dec{k}.up.b"] = (c,)
        shapes[f"dec{k}.conv.w"] = (c, 3 * c, 3, 3)
        shapes[f"dec{k}.conv.b"] = (c,)
        cin = c
    shapes["head.w"] = (1, b, 1, 1)
    shapes["head.b"] = (1,)
    return shapes


def param_count(cfg: NetConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def _fan_in(cfg: NetConfig, name: str, shape) -> int:
    if len(shape) == 2:
        return shape[1]
    transposed = ".up." in name or (name.startswith("bridge") and _bridge_plan(cfg, int(name[6]))[0] == "up")
    return (shape[0] if transposed else shape[1]) * shape[2] * shape[3]


def init_params(cfg: NetConfig, seed: int) -> NetParams:
    """Fan-in scaled uniform weights, zero biases, N(0, 0.02) positions, unit norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "pos":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(cfg, name, shape))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = torch.tensor(arr, dtype=cfg.torch_dtype)
    return params


def check_params(cfg: NetConfig, params: NetParams) -> None:
    expected = param_shapes(cfg)
    missing = [n for n in expected if n not in params]
    if missing:
        raise ShapeError(f"missing parameter for layer {missing[0]}")
    extra = [n for n in params if n not in expected]
    if extra:
        raise ShapeError(f"unexpected parameter {extra[0]}")
    for name, shape in expected.items():
        got = tuple(params[name].shape)
        if got != shape:
            raise ShapeError(f"layer {name}: expected shape {shape}, got {got}")


def encode_input(obs, side: Optional[int] = None) -> np.ndarray:
    """One-hot [3, S, S]: channel 0 free, 1 uncertain, 2 obstacle."""
    cells = obs.cells if isinstance(obs, LocalPatch) else obs
    if isinstance(cells, TrinaryMap):
        cells = cells.cells
    if side is not None and cells.shape != (side, side):
        raise ShapeError(f"patch shape {cells.shape} does not match network side {side}")
    return np.stack([cells == int(s) for s in (FREE, UNCERTAIN, OBSTACLE)]).astype(np.float64)


def _layer_norm(x, g, b):
    return F.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)


def _attention(x, params, i, heads):
    B, T, d = x.shape
    hd = d // heads
    qkv = F.linear(x, params[f"blk{i}.qkv.w"], params[f"blk{i}.qkv.b"])
    q, k, v = qkv.reshape(B, T, 3, heads, hd).permute(2, 0, 3, 1, 4)
    att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    out = (att @ v).transpose(1, 2).reshape(B, T, d)
    return F.linear(out, params[f"blk{i}.proj.w"], params[f"blk{i}.proj.b"])


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """[B, C, S, S] -> [B, T, C*p*p], tokens in row-major patch order."""
    return F.unfold(x, kernel_size=p, stride=p).transpose(1, 2)


def tokens(cfg: NetConfig, params: NetParams, x: torch.Tensor, with_pos: bool = True) -> torch.Tensor:
    t = F.linear(patchify(x, cfg.patch), params["patch.w"], params["patch.b"])
    return t + params["pos"] if with_pos else t


def forward(cfg: NetConfig, params: NetParams, x) -> torch.Tensor:
    """Obstacle probabilities [1, S, S] (or [B, 1, S, S] for a batched input)."""
    check_params(cfg, params)
    x = torch.as_tensor(x, dtype=cfg.torch_dtype)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, cfg.side, cfg.side):
        raise ShapeError(f"input: expected [3, {cfg.side}, {cfg.side}], got {list(x.shape)}")

    skips = []
    h = x
    for k in range(4):
        h = F.relu(F.conv2d(h, params[f"enc{k}.conv.w"], params[f"enc{k}.conv.b"], padding=1))
        skips.append(h)
        h = F.relu(F.conv2d(h, params[f"enc{k}.down.w"], params[f"enc{k}.down.b"], stride=2, padding=1))

    t = tokens(cfg, params, x)
    for i in range(cfg.depth):
        t = t + _attention(_layer_norm(t, params[f"blk{i}.ln1.g"], params[f"blk{i}.ln1.b"]), params, i, cfg.heads)
        m = _layer_norm(t, params[f"blk{i}.ln2.g"], params[f"blk{i}.ln2.b"])
        m = F.linear(F.gelu(F.linear(m, params[f"blk{i}.fc1.w"], params[f"blk{i}.fc1.b"])),
                     params[f"blk{i}.fc2.w"], params[f"blk{i}.fc2.b"])
        t = t + m
    B = x.shape[0]
    grid = t.transpose(1, 2).reshape(B, cfg.embed_dim, cfg.grid, cfg.grid)
    parts = torch.chunk(grid, 4, dim=1)

    fused = []
    for k in range(4):
        kind, n = _bridge_plan(cfg, k)
        g = parts[k]
        for j in range(n):
            w, bias = params[f"bridge{k}.{j}.w"], params[f"bridge{k}.{j}.b"]
            if kind == "up":
                g = F.conv_transpose2d(g, w, bias, stride=2)
            elif kind == "same":
                g = F.conv2d(g, w, bias)
            else:
                g = F.conv2d(g, w, bias, stride=2)
            g = F.relu(g)
        fused.append(torch.cat([skips[k], g], dim=1))

    for k in (3, 2, 1, 0):
        h = F.conv_transpose2d(h, params[f"dec{k}.up.w"], params[f"dec{k}.up.b"], stride=2)
        h = torch.cat([h, fused[k]], dim=1)
        h = F.relu(F.conv2d(h, params[f"dec{k}.conv.w"], params[f"dec{k}.conv.b"], padding=1))
    out = torch.sigmoid(F.conv2d(h, params["head.w"], params["head.b"]))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# predictors

Predictor = Callable[[LocalPatch], ProbMap]


def identity_predictor(obs: LocalPatch) -> ProbMap:
    return ProbMap(obs.cells.numeric())


def oracle_predictor(truth: TrinaryMap) -> Predictor:
    """Predictor that returns the true map under the observation window."""

    def predict(obs: LocalPatch) -> ProbMap:
        if obs.origin is None:
            raise MapDomainError("oracle predictor needs the patch origin")
        window = crop_window(truth.cells, obs.center, obs.range_L, int(OBSTACLE))
        return ProbMap(window.astype(np.float64) / 2.0)

    return predict


class NetPredictor:
    """Wraps trained parameters as a read-only predictor."""

    def __init__(self, cfg: NetConfig, params: NetParams):
        check_params(cfg, params)
        self.cfg = cfg
        self.params = {k: v.detach() for k, v in params.items()}

    def __call__(self, obs: LocalPatch) -> ProbMap:
        x = encode_input(obs, self.cfg.side)
        with torch.no_grad():
            y = forward(self.cfg, self.params, x)
        return ProbMap(y[0].to(torch.float64).numpy())


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SENSEMAP-NET"
VERSION = 1


def save_checkpoint(path, cfg: NetConfig, params: NetParams, extra: Optional[dict] = None,
                    extra_tensors: Optional[dict[str, torch.Tensor]] = None) -> None:
    """Write header JSON (config, tensor names/shapes, ``extra``) then raw little-endian f64 data."""
    tensors = dict(params)
    tensors.update(extra_tensors or {})
    header = {
        "config": cfg.to_json(),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(t.detach().to(torch.float64).numpy().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[NetConfig, NetParams, dict, dict[str, torch.Tensor]]:
    """Returns (config, network params, extra header dict, other stored tensors)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a network checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off : off + hlen])
    off += hlen
    cfg = NetConfig.from_json(header["config"])
    names = set(param_shapes(cfg))
    params, others = {}, {}
    for entry in header["tensors"]:
        n = math.prod(entry["shape"])
        raw = data[off : off + 8 * n]
        if len(raw) != 8 * n:
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
        off += 8 * n
        dtype = cfg.torch_dtype if entry["name"] in names else torch.float64
        (params if entry["name"] in names else others)[entry["name"]] = torch.tensor(arr, dtype=dtype)
    check_params(cfg, params)
    return cfg, params, header["extra"], others
