"""Network definition: shared 3D-CNN encoder, future-visit pooling, fusion,
GRU unroll, sigmoid head, and the cross-sectional / average-pooling variants.

The encoder applies the same weights to every visit.  Input volumes are
cubes whose extent is divisible by 2**n_blocks; the default four conv
blocks (16/32/64/64 channels, each two conv->batchnorm->relu->dropout
stacks followed by 2x2x2 max pooling) need extent divisible by 16.  An
extent of 8 is supported with three blocks for small gradient-check
models.  Features are 16 wide with a final tanh.

Variants:

* ``cnn``         - per-visit classification, no temporal interaction.
* ``cnn_ap``      - per-visit features concatenated with the average of the
                    other visits' features (optionally including the
                    current one) before the head.
* ``cnn_rnn``     - GRU over raw per-visit features; fusion skipped.
* ``cnn_rnn_lp``  - future-visit pooling + fusion + GRU.

The consistency-loss switch lives in the training configuration, not here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError, Tape, Tensor

VARIANTS = ("cnn", "cnn_ap", "cnn_rnn", "cnn_rnn_lp")
FEATURE_WIDTH = 16
CHANNELS = (16, 32, 64, 64)
DEFAULT_HIDDEN_WIDTH = 64
DEFAULT_DROPOUT = 0.1

CHECKPOINT_MAGIC = b"LPWT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or mismatched parameter checkpoint file."""


@dataclass
class ConvStack:
    kernels: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState = field(default_factory=BatchNormState)


@dataclass
class EncoderParams:
    blocks: list  # list of [ConvStack, ConvStack]
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    input_extent: int
    dropout_rate: float = DEFAULT_DROPOUT

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


@dataclass
class GruParams:
    """Eq.-style GRU without bias terms; the update gate scales the
    previous state."""

    w_update: Tensor
    w_reset: Tensor
    w_cand: Tensor
    u_update: Tensor
    u_reset: Tensor
    u_cand: Tensor
    zero_bias: Tensor = field(init=False)

    def __post_init__(self):
        self.zero_bias = Tensor(np.zeros(self.w_update.shape[0], np.float32))


@dataclass
class FusionParams:
    weight: Tensor  # [16, 32]
    bias: Tensor


@dataclass
class HeadParams:
    weight: Tensor  # [1, in_width]
    bias: Tensor


@dataclass
class ModelParams:
    variant: str
    encoder: EncoderParams
    fusion: Optional[FusionParams]
    gru: Optional[GruParams]
    head: HeadParams
    ap_include_current: bool = False

    def named_parameters(self):
        """Trainable tensors in a fixed order (running stats excluded)."""
        out = []
        for i, block in enumerate(self.encoder.blocks):
            for j, stack in enumerate(block):
                base = f"encoder.block{i}.stack{j}"
                out.append((f"{base}.kernels", stack.kernels))
                out.append((f"{base}.bias", stack.bias))
                out.append((f"{base}.gamma", stack.gamma))
                out.append((f"{base}.beta", stack.beta))
        out.append(("encoder.fc1.weight", self.encoder.fc1_weight))
        out.append(("encoder.fc1.bias", self.encoder.fc1_bias))
        out.append(("encoder.fc2.weight", self.encoder.fc2_weight))
        out.append(("encoder.fc2.bias", self.encoder.fc2_bias))
        if self.fusion is not None:
            out.append(("fusion.weight", self.fusion.weight))
            out.append(("fusion.bias", self.fusion.bias))
        if self.gru is not None:
            out.append(("gru.w_update", self.gru.w_update))
            out.append(("gru.w_reset", self.gru.w_reset))
            out.append(("gru.w_cand", self.gru.w_cand))
            out.append(("gru.u_update", self.gru.u_update))
            out.append(("gru.u_reset", self.gru.u_reset))
            out.append(("gru.u_cand", self.gru.u_cand))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def l2_parameters(self):
        """Recurrent and linear weight matrices only: GRU, fusion, encoder
        FCs and head.  Convolution kernels and all bias-like vectors stay
        out of the penalty."""
        keep = []
        for name, tensor in self.named_parameters():
            if name.endswith(".weight") or name.startswith("gru."):
                keep.append((name, tensor))
        return keep


def n_blocks_for_extent(extent: int) -> int:
    if extent % 16 == 0:
        return 4
    if extent == 8:
        return 3
    raise ShapeError(
        f"input extent must be divisible by 16 (or exactly 8 for the "
        f"reduced test model), got {extent}")


def head_in_width(variant: str) -> int:
    return 2 * FEATURE_WIDTH if variant == "cnn_ap" else FEATURE_WIDTH


def flatten_width(extent: int) -> int:
    nb = n_blocks_for_extent(extent)
    return CHANNELS[nb - 1] * (extent // 2**nb) ** 3


def init_params(variant: str, seed: int, input_extent: int = 16,
                hidden_width: int = DEFAULT_HIDDEN_WIDTH,
                dropout_rate: float = DEFAULT_DROPOUT,
                ap_include_current: bool = False) -> ModelParams:
    """Deterministic initialization: conv/dense weights uniform in
    +-sqrt(1/fan_in), biases and beta zero, gamma one, GRU matrices from the
    QR factor of a seeded Gaussian draw."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    def uniform_fan_in(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32))

    def orthogonal(n):
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        q = q * np.sign(np.diag(r))  # fix the sign ambiguity of QR
        return Tensor(q.astype(np.float32))

    nb = n_blocks_for_extent(input_extent)
    blocks = []
    c_in = 1
    for b in range(nb):
        c_out = CHANNELS[b]
        block = []
        for _ in range(2):
            block.append(ConvStack(
                kernels=uniform_fan_in((c_out, c_in, 3, 3, 3), c_in * 27),
                bias=Tensor(np.zeros(c_out, np.float32)),
                gamma=Tensor(np.ones(c_out, np.float32)),
                beta=Tensor(np.zeros(c_out, np.float32)),
            ))
            c_in = c_out
        blocks.append(block)
    flat = flatten_width(input_extent)
    encoder = EncoderParams(
        blocks=blocks,
        fc1_weight=uniform_fan_in((hidden_width, flat), flat),
        fc1_bias=Tensor(np.zeros(hidden_width, np.float32)),
        fc2_weight=uniform_fan_in((FEATURE_WIDTH, hidden_width), hidden_width),
        fc2_bias=Tensor(np.zeros(FEATURE_WIDTH, np.float32)),
        input_extent=input_extent,
        dropout_rate=dropout_rate,
    )
    fusion = None
    if variant == "cnn_rnn_lp":
        fusion = FusionParams(
            weight=uniform_fan_in((FEATURE_WIDTH, 2 * FEATURE_WIDTH), 2 * FEATURE_WIDTH),
            bias=Tensor(np.zeros(FEATURE_WIDTH, np.float32)),
        )
    gru = None
    if variant in ("cnn_rnn", "cnn_rnn_lp"):
        gru = GruParams(*[orthogonal(FEATURE_WIDTH) for _ in range(6)])
    width = head_in_width(variant)
    head = HeadParams(
        weight=uniform_fan_in((1, width), width),
        bias=Tensor(np.zeros(1, np.float32)),
    )
    return ModelParams(variant=variant, encoder=encoder, fusion=fusion, gru=gru,
                       head=head, ap_include_current=ap_include_current)


# ---------------------------------------------------------------------------
# forward paths


def _conv_stage(x: Tensor, enc: EncoderParams, mode: str, tape, rng) -> Tensor:
    for block in enc.blocks:
        for stack in block:
            x = ad.conv3d(x, stack.kernels, stack.bias, tape)
            x = ad.batchnorm3d(x, stack.gamma, stack.beta, mode, stack.bn, tape)
            x = ad.relu(x, tape)
            x = ad.dropout(x, enc.dropout_rate, mode, rng, tape)
        x = ad.maxpool3d(x, tape)
    return x


def _fc_stage(flat: Tensor, enc: EncoderParams, tape) -> Tensor:
    h = ad.tanh(ad.dense(flat, enc.fc1_weight, enc.fc1_bias, tape), tape)
    return ad.tanh(ad.dense(h, enc.fc2_weight, enc.fc2_bias, tape), tape)


def _check_volume(shape, enc: EncoderParams):
    if len(shape) != 4 or shape[0] != 1:
        raise ShapeError(f"volume must be [1,D,H,W], got {shape}")
    d, h, w = shape[1:]
    if not (d == h == w):
        raise ShapeError(f"volume must be cubic, got extents {(d, h, w)}")
    if d % 2**len(enc.blocks):
        raise ShapeError(
            f"extent {d} not divisible by {2**len(enc.blocks)} "
            f"({len(enc.blocks)} pooling halvings)")


def encode(volume: Tensor, enc: EncoderParams, mode: str,
           tape: Optional[Tape] = None,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """One visit volume -> 16-wide feature in (-1, 1)."""
    _check_volume(volume.shape, enc)
    x = _conv_stage(volume, enc, mode, tape, rng)
    return _fc_stage(ad.flatten(x, tape), enc, tape)


def encode_stack(volumes: Tensor, enc: EncoderParams, mode: str,
                 tape: Optional[Tape] = None,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Batched encoder: [V,1,D,H,W] -> [V,16].  Train-mode batchnorm then
    normalizes over the whole stack, which is the mini-batch semantics the
    training loop wants."""
    if len(volumes.shape) != 5:
        raise ShapeError(f"expected [V,1,D,H,W], got {volumes.shape}")
    _check_volume(volumes.shape[1:], enc)
    x = _conv_stage(volumes, enc, mode, tape, rng)
    h = ad.flatten_rows(x, tape)
    return _fc_stage(h, enc, tape)


def longitudinal_pool(features: Sequence[Tensor],
                      tape: Optional[Tape] = None) -> list:
    """Pooled embedding per visit: the mean of all later visits' features;
    the last visit, having none, keeps its own feature."""
    if not features:
        raise ShapeError("longitudinal_pool needs at least one feature")
    m = len(features)
    pooled = []
    for i in range(m):
        if i == m - 1:
            pooled.append(features[i])
        else:
            pooled.append(ad.mean_of_set(list(features[i + 1:]), tape))
    return pooled


def fuse(c_t: Tensor, g_t: Tensor, params: FusionParams,
         tape: Optional[Tape] = None) -> Tensor:
    if c_t.shape != (FEATURE_WIDTH,) or g_t.shape != (FEATURE_WIDTH,):
        raise ShapeError(
            f"fuse expects two [{FEATURE_WIDTH}] features, got {c_t.shape}, {g_t.shape}")
    joint = ad.concat([c_t, g_t], axis=0, tape=tape)
    return ad.tanh(ad.dense(joint, params.weight, params.bias, tape), tape)


def gru_step(h_t: Tensor, h_prev: Tensor, params: GruParams,
             tape: Optional[Tape] = None) -> Tensor:
    """One recurrence step; note the update gate multiplies the previous
    state (zero parameters give 0.5 * h_prev)."""
    zb = params.zero_bias
    z = ad.sigmoid(ad.add(ad.dense(h_t, params.w_update, zb, tape),
                          ad.dense(h_prev, params.u_update, zb, tape), tape), tape)
    r = ad.sigmoid(ad.add(ad.dense(h_t, params.w_reset, zb, tape),
                          ad.dense(h_prev, params.u_reset, zb, tape), tape), tape)
    cand = ad.tanh(ad.add(ad.dense(h_t, params.w_cand, zb, tape),
                          ad.dense(ad.mul(r, h_prev, tape), params.u_cand, zb, tape),
                          tape), tape)
    one = Tensor(np.ones(h_t.shape, np.float32))
    return ad.add(ad.mul(z, h_prev, tape),
                  ad.mul(ad.sub(one, z, tape), cand, tape), tape)


def _head_prob(x: Tensor, head: HeadParams, tape) -> Tensor:
    return ad.sigmoid(ad.dense(x, head.weight, head.bias, tape), tape)


def _sequence_tail(cs: list, params: ModelParams, tape) -> list:
    """Per-visit probabilities from per-visit features, by variant."""
    m = len(cs)
    if params.variant == "cnn":
        return [_head_prob(c, params.head, tape) for c in cs]
    if params.variant == "cnn_ap":
        probs = []
        for i, c in enumerate(cs):
            if params.ap_include_current:
                others = list(cs)
            else:
                others = [cs[j] for j in range(m) if j != i]
            # a single-visit sequence has no other visits; mirror the
            # pooling rule and fall back to the visit's own feature
            avg = ad.mean_of_set(others, tape) if others else c
            probs.append(_head_prob(ad.concat([c, avg], axis=0, tape=tape),
                                    params.head, tape))
        return probs
    if params.variant == "cnn_rnn":
        hidden = [c for c in cs]
    elif params.variant == "cnn_rnn_lp":
        pooled = longitudinal_pool(cs, tape)
        hidden = [fuse(c, g, params.fusion, tape) for c, g in zip(cs, pooled)]
    else:
        raise ValueError(f"unknown variant {params.variant!r}")
    state = Tensor(np.zeros(FEATURE_WIDTH, np.float32))
    probs = []
    for h in hidden:
        state = gru_step(h, state, params.gru, tape)
        probs.append(_head_prob(state, params.head, tape))
    return probs


def forward_sequence(volumes: Sequence[Tensor], params: ModelParams, mode: str,
                     tape: Optional[Tape] = None,
                     rng: Optional[np.random.Generator] = None) -> list:
    """Predictions p_1..p_m for one subject's ordered visit volumes.

    Visits are encoded independently (weight sharing; per-visit statistics
    in train mode), so for the cnn variant p_i depends on x_i only.
    """
    if not volumes:
        raise ShapeError("forward_sequence needs at least one volume")
    cs = [encode(v, params.encoder, mode, tape, rng) for v in volumes]
    return _sequence_tail(cs, params, tape)


def forward_subjects(subject_volumes: Sequence[Sequence[np.ndarray]],
                     params: ModelParams, mode: str,
                     tape: Optional[Tape] = None,
                     rng: Optional[np.random.Generator] = None) -> list:
    """Batched forward over several subjects: all visits are encoded as one
    stack (one set of large BLAS calls), then each subject's rows feed the
    per-variant tail.  Returns one list of per-visit probabilities per
    subject."""
    counts = [len(v) for v in subject_volumes]
    if not counts or min(counts) == 0:
        raise ShapeError("every subject needs at least one volume")
    stack = np.concatenate([np.asarray(v, np.float32)[None] for vols in subject_volumes
                            for v in vols], axis=0)
    feats = encode_stack(Tensor(stack), params.encoder, mode, tape, rng)
    out = []
    offset = 0
    for n in counts:
        cs = [ad.take_row(feats, offset + i, tape) for i in range(n)]
        out.append(_sequence_tail(cs, params, tape))
        offset += n
    return out


# ---------------------------------------------------------------------------
# checkpoint file format: magic "LPWT", version, variant tag, then
# (name, shape, float32 little-endian payload) groups; byte-exact round trip


def _groups(params: ModelParams):
    yield from params.named_parameters()
    for i, block in enumerate(params.encoder.blocks):
        for j, stack in enumerate(block):
            if stack.bn.initialized:
                base = f"encoder.block{i}.stack{j}"
                yield f"{base}.bn_mean", Tensor(stack.bn.mean)
                yield f"{base}.bn_var", Tensor(stack.bn.var)
    meta = np.array([params.encoder.input_extent,
                     params.encoder.dropout_rate,
                     1.0 if params.ap_include_current else 0.0], np.float32)
    yield "meta.model", Tensor(meta)


def save_checkpoint(path, params: ModelParams) -> None:
    groups = list(_groups(params))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        tag = params.variant.encode()
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<I", len(groups)))
        for name, tensor in groups:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            arr = tensor.array
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (tag_len,) = struct.unpack("<I", _read_exact(fh, 4, "variant length"))
        variant = _read_exact(fh, tag_len, "variant").decode()
        if variant not in VARIANTS:
            raise CheckpointError(f"{path}: unknown variant {variant!r}")
        (n_groups,) = struct.unpack("<I", _read_exact(fh, 4, "group count"))
        groups = {}
        for _ in range(n_groups):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "extent"))[0]
                for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, 4 * count, f"payload of {name}")
            groups[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    meta = groups.pop("meta.model", None)
    if meta is None:
        raise CheckpointError(f"{path}: missing meta group")
    extent = int(meta[0])
    params = init_params(variant, seed=0, input_extent=extent,
                         dropout_rate=float(meta[1]),
                         ap_include_current=bool(meta[2] > 0.5))
    for name, tensor in params.named_parameters():
        if name not in groups:
            raise CheckpointError(f"{path}: missing group {name}")
        loaded = groups.pop(name)
        if loaded.shape != tensor.array.shape:
            raise CheckpointError(
                f"{path}: group {name} has shape {loaded.shape}, "
                f"expected {tensor.array.shape}")
        tensor.array[...] = loaded
    for i, block in enumerate(params.encoder.blocks):
        for j, stack in enumerate(block):
            base = f"encoder.block{i}.stack{j}"
            mean = groups.pop(f"{base}.bn_mean", None)
            var = groups.pop(f"{base}.bn_var", None)
            if mean is not None and var is not None:
                stack.bn.mean = mean
                stack.bn.var = var
    if groups:
        raise CheckpointError(f"{path}: unexpected groups {sorted(groups)}")
    return params
