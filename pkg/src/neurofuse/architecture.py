"""The four-block volumetric CNN, its 1024-wide encoder view, and cascade heads."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

INPUT_EXTENT = 96
ENCODING_DIM = 1024
CASCADE_HIDDEN = 512
NUM_CLASSES = T.NUM_CLASSES
CHECKPOINT_MAGIC = b"NFUSE1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv3d | instance_norm | relu | maxpool | linear | softmax
    k: int | None = None
    c: int | None = None  # channel multiple of the widening factor (or output width for linear)
    p: int | None = None
    s: int | None = None
    d: int | None = None

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError(f"{self.kind}: kernel size must be >= 1")
        if self.s is not None and self.s < 1:
            raise ValueError(f"{self.kind}: stride must be >= 1")
        if self.p is not None and self.p < 0:
            raise ValueError(f"{self.kind}: padding must be >= 0")
        if self.d is not None and self.d < 1:
            raise ValueError(f"{self.kind}: dilation must be >= 1")

    def describe(self) -> str:
        if self.kind == "conv3d":
            return f"k{self.k}-c{self.c}·f-p{self.p}-s{self.s}-d{self.d}"
        if self.kind == "maxpool":
            return f"k{self.k}-s{self.s}"
        if self.kind == "linear":
            return str(self.c)
        return ""


@dataclass(frozen=True)
class BlockSpec:
    conv: LayerSpec
    pool: LayerSpec
    declared_conv: int
    declared_pool: int


REFERENCE_BLOCKS = (
    BlockSpec(LayerSpec("conv3d", k=1, c=4, p=0, s=1, d=1), LayerSpec("maxpool", k=3, s=2), 96, 47),
    BlockSpec(LayerSpec("conv3d", k=3, c=32, p=0, s=1, d=2), LayerSpec("maxpool", k=3, s=2), 43, 21),
    BlockSpec(LayerSpec("conv3d", k=5, c=64, p=2, s=1, d=2), LayerSpec("maxpool", k=3, s=2), 17, 8),
    BlockSpec(LayerSpec("conv3d", k=3, c=64, p=1, s=1, d=2), LayerSpec("maxpool", k=5, s=2), 6, 5),
)


@dataclass(frozen=True)
class NetworkSpec:
    """Four-block reference architecture.

    ``channels`` overrides the conv widths (normally ``c * f``) for
    desk-scale runs; leave it ``None`` for the published widths.
    """

    widening_factor: int = 1
    channels: tuple[int, int, int, int] | None = None
    blocks: tuple[BlockSpec, ...] = REFERENCE_BLOCKS
    encoding_dim: int = ENCODING_DIM
    num_classes: int = NUM_CLASSES
    eps: float = 1e-5

    def __post_init__(self):
        if self.widening_factor < 1:
            raise ValueError(f"widening factor must be >= 1, got {self.widening_factor}")
        if len(self.blocks) != 4:
            raise ValueError("the network has exactly 4 blocks")
        if self.num_classes != NUM_CLASSES:
            raise ValueError("the head must output exactly 3 classes")
        if self.channels is not None:
            if len(self.channels) != 4 or any(c < 1 for c in self.channels):
                raise ValueError(f"channels must be 4 positive ints, got {self.channels}")
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def channel_widths(self) -> tuple[int, ...]:
        if self.channels is not None:
            return self.channels
        return tuple(b.conv.c * self.widening_factor for b in self.blocks)


@dataclass(frozen=True)
class PlanRow:
    block: str
    layer: str
    type: str
    declared: int | None
    computed: int | None

    @property
    def flagged(self) -> bool:
        return self.declared is not None and self.computed != self.declared


def shape_plan(spec: NetworkSpec | None = None, input_extent: int = INPUT_EXTENT) -> list[PlanRow]:
    """Per-layer cubic output extents next to the declared reference sizes."""
    spec = spec or NetworkSpec()
    rows = [PlanRow("", "Inputs", "", INPUT_EXTENT, input_extent)]
    extent = input_extent
    for i, block in enumerate(spec.blocks, start=1):
        conv, pool = block.conv, block.pool
        try:
            extent = T.conv_output_extent(extent, conv.k, conv.p, conv.s, conv.d)
        except ValueError as exc:
            raise ValueError(f"layer {len(rows)} (block {i} Conv3D) infeasible: {exc}") from None
        rows.append(PlanRow(str(i), "Conv3D", conv.describe(), block.declared_conv, extent))
        rows.append(PlanRow("", "InstanceNorm3D", "", None, extent))
        rows.append(PlanRow("", "ReLU", "", None, extent))
        try:
            extent = T.pool_output_extent(extent, pool.k, pool.s)
        except ValueError as exc:
            raise ValueError(f"layer {len(rows)} (block {i} MaxPool3D) infeasible: {exc}") from None
        rows.append(PlanRow("", "MaxPool3D", pool.describe(), block.declared_pool, extent))
    rows.append(PlanRow("FC1", "", str(spec.encoding_dim), None, None))
    rows.append(PlanRow("FC2", "", str(spec.num_classes), None, None))
    rows.append(PlanRow("Softmax", "", str(spec.num_classes), None, None))
    return rows


def format_shape_plan(rows: Iterable[PlanRow]) -> str:
    def cube(v):
        return "" if v is None else f"{v}x{v}x{v}"

    header = f"{'Block':<8}{'Layer':<16}{'Type':<20}{'Output size':<14}{'computed':<14}flag"
    lines = [header, "-" * len(header)]
    for r in rows:
        flag = "MISMATCH" if r.flagged else ""
        lines.append(f"{r.block:<8}{r.layer:<16}{r.type:<20}{cube(r.declared):<14}{cube(r.computed):<14}{flag}")
    return "\n".join(lines) + "\n"


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Network:
    """Parameters of the four-block network, keyed by stable names."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    # stage i consumes the activation produced by stage i-1; blocks are stages 0-3
    def _block(self, i: int, h: Tensor) -> Tensor:
        blk = self.spec.blocks[i]
        p = self.params
        pre = f"block{i + 1}"
        h = T.conv3d(h, p[f"{pre}.conv.weight"], p[f"{pre}.conv.bias"], blk.conv.p, blk.conv.s, blk.conv.d)
        h = T.instance_norm3d(h, p[f"{pre}.norm.gamma"], p[f"{pre}.norm.beta"], self.spec.eps)
        h = T.relu(h)
        return T.maxpool3d(h, blk.pool.k, blk.pool.s)

    def _encode_head(self, h: Tensor) -> Tensor:
        h = T.flatten(h)
        return T.relu(T.linear(h, self.params["fc1.weight"], self.params["fc1.bias"]))

    def _classify(self, enc: Tensor) -> Tensor:
        return T.linear(enc, self.params["fc2.weight"], self.params["fc2.bias"])

    def stages(self):
        """Forward pass as a list of callables; used to resume from cached activations."""
        blocks = [lambda h, i=i: self._block(i, h) for i in range(4)]
        return blocks + [self._encode_head, self._classify]

    def stage_of(self, name: str) -> int:
        if name.startswith("block"):
            return int(name[5]) - 1
        return 4 if name.startswith("fc1") else 5

    def _check_input(self, batch) -> Tensor:
        batch = batch if isinstance(batch, Tensor) else Tensor(batch)
        want = (1, INPUT_EXTENT, INPUT_EXTENT, INPUT_EXTENT)
        if batch.data.ndim != 5 or batch.shape[1:] != want:
            raise ValueError(f"network input must be [N, 1, 96, 96, 96], got {batch.shape}")
        return batch

    def encode(self, batch) -> Tensor:
        h = self._check_input(batch)
        for i in range(4):
            h = self._block(i, h)
        return self._encode_head(h)

    def logits(self, batch) -> Tensor:
        return self._classify(self.encode(batch))

    def forward(self, batch) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.logits(batch).data)

    __call__ = forward

    def copy(self) -> "Network":
        return Network(self.spec, {k: Tensor(v.data.copy(), v.tracked) for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))


def build_network(widening_factor: int = 1, seed: int = 0, channels=None) -> Network:
    spec = NetworkSpec(widening_factor=widening_factor, channels=tuple(channels) if channels else None)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    cin = 1
    extent = INPUT_EXTENT
    for i, (blk, cout) in enumerate(zip(spec.blocks, spec.channel_widths), start=1):
        k = blk.conv.k
        fan_in = cin * k ** 3
        params[f"block{i}.conv.weight"] = Tensor(_uniform(rng, (cout, cin, k, k, k), fan_in), True)
        params[f"block{i}.conv.bias"] = Tensor(_uniform(rng, (cout,), fan_in), True)
        params[f"block{i}.norm.gamma"] = Tensor(np.ones(cout, np.float32), True)
        params[f"block{i}.norm.beta"] = Tensor(np.zeros(cout, np.float32), True)
        extent = T.conv_output_extent(extent, k, blk.conv.p, blk.conv.s, blk.conv.d)
        extent = T.pool_output_extent(extent, blk.pool.k, blk.pool.s)
        cin = cout
    flat = cin * extent ** 3
    params["fc1.weight"] = Tensor(_uniform(rng, (spec.encoding_dim, flat), flat), True)
    params["fc1.bias"] = Tensor(_uniform(rng, (spec.encoding_dim,), flat), True)
    params["fc2.weight"] = Tensor(_uniform(rng, (spec.num_classes, spec.encoding_dim), spec.encoding_dim), True)
    params["fc2.bias"] = Tensor(_uniform(rng, (spec.num_classes,), spec.encoding_dim), True)
    return Network(spec, params)


def forward(network: Network, batch) -> np.ndarray:
    return network.forward(batch)


def encode(network: Network, batch) -> np.ndarray:
    with T.no_grad():
        return network.encode(batch).data


CASCADE_MODES = ("additive", "concatenated")


@dataclass
class CascadeHead:
    """Two-layer classifier over a pair of modality encodings."""

    mode: str
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return ENCODING_DIM if self.mode == "additive" else 2 * ENCODING_DIM

    def combine(self, enc_t1, enc_fl) -> Tensor:
        a = enc_t1 if isinstance(enc_t1, Tensor) else Tensor(np.atleast_2d(enc_t1))
        b = enc_fl if isinstance(enc_fl, Tensor) else Tensor(np.atleast_2d(enc_fl))
        for name, e in (("T1", a), ("FLAIR", b)):
            if e.data.ndim != 2 or e.shape[1] != ENCODING_DIM:
                raise ValueError(f"{name} encoding must be {ENCODING_DIM} wide, got {e.shape}")
        return T.add(a, b) if self.mode == "additive" else T.concat(a, b)

    def logits(self, enc_t1, enc_fl) -> Tensor:
        h = self.combine(enc_t1, enc_fl)
        h = T.relu(T.linear(h, self.params["head.fc1.weight"], self.params["head.fc1.bias"]))
        return T.linear(h, self.params["head.fc2.weight"], self.params["head.fc2.bias"])

    def forward(self, enc_t1, enc_fl) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.logits(enc_t1, enc_fl).data)

    def copy(self) -> "CascadeHead":
        return CascadeHead(self.mode, {k: Tensor(v.data.copy(), v.tracked) for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def build_cascade_head(mode: str, seed: int = 0) -> CascadeHead:
    if mode not in CASCADE_MODES:
        raise ValueError(f"cascade mode must be one of {CASCADE_MODES}, got {mode!r}")
    rng = np.random.default_rng(seed)
    head = CascadeHead(mode)
    d = head.input_dim
    head.params = {
        "head.fc1.weight": Tensor(_uniform(rng, (CASCADE_HIDDEN, d), d), True),
        "head.fc1.bias": Tensor(_uniform(rng, (CASCADE_HIDDEN,), d), True),
        "head.fc2.weight": Tensor(_uniform(rng, (NUM_CLASSES, CASCADE_HIDDEN), CASCADE_HIDDEN), True),
        "head.fc2.bias": Tensor(_uniform(rng, (NUM_CLASSES,), CASCADE_HIDDEN), True),
    }
    return head


def cascade_forward(head: CascadeHead, enc_t1, enc_fl) -> np.ndarray:
    return head.forward(enc_t1, enc_fl)


# ---------------------------------------------------------------------------
# checkpoint files
#
#   magic "NFUSE1" | widening factor (u32) | parameter count (u32)
#   per parameter: name length (u32) | utf-8 name | rank (u32) | extents (u32 * rank) | f32 LE data
#
# Cascade heads are stored with widening factor 0.


def _write_params(path: Path, widening_factor: int, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", widening_factor, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_params(path: Path) -> tuple[int, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:6] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    f, count = struct.unpack_from("<II", buf, 6)
    pos = 14
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos: pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        params[name] = arr.astype(np.float32)
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return f, params


def save_checkpoint(path, model: Network | CascadeHead) -> None:
    f = model.spec.widening_factor if isinstance(model, Network) else 0
    _write_params(Path(path), f, model.state())


def load_checkpoint(path) -> Network | CascadeHead:
    f, arrays = _read_params(Path(path))
    if f == 0:
        width = arrays["head.fc1.weight"].shape[1]
        mode = "additive" if width == ENCODING_DIM else "concatenated"
        head = CascadeHead(mode, {k: Tensor(v, True) for k, v in arrays.items()})
        if width != head.input_dim:
            raise ValueError(f"{path}: cascade head input width {width} is neither 1024 nor 2048")
        return head
    channels = tuple(arrays[f"block{i}.conv.weight"].shape[0] for i in range(1, 5))
    spec = NetworkSpec(widening_factor=f, channels=channels)
    if spec.channels == tuple(b.conv.c * f for b in spec.blocks):
        spec = NetworkSpec(widening_factor=f)
    reference = build_network(f, 0, spec.channels)
    missing = set(reference.params) ^ set(arrays)
    if missing:
        raise ValueError(f"{path}: parameter names differ from the architecture: {sorted(missing)}")
    for name, ref in reference.params.items():
        if ref.shape != arrays[name].shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {ref.shape}")
    return Network(spec, {k: Tensor(v, True) for k, v in arrays.items()})
