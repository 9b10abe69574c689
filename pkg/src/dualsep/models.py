"""Separation model assemblies and checkpoint persistence.

``FdModel`` masks STFT magnitudes with a stack of dual-path Bi-LSTM blocks.
``TdModel`` masks a learned conv encoding with stacked DPRNN blocks. Both
run either path with a single parameter set.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import ConvCodecParams, StftConfig, conv_decode, conv_encode, encoder_norm, istft_synthesize, stft_analyze
from .dualpath import (
    DprnnBlockParams,
    DualBlockParams,
    PathError,
    PathSelector,
    Scheme,
    _path,
    chunk_merge,
    chunk_split,
    dprnn_block_forward,
    stack_forward,
)
from .layers import FcParams, NormParams, fc_forward
from .numcore import Rng, Tensor, mul, relu, reshape, slice_, transpose

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _check_norm_choice(name: str, value: str) -> None:
    if value not in ("gln", "cln"):
        raise ValueError(f"{name} must be 'gln' or 'cln', not {value!r}")


@dataclass
class FdModelConfig:
    n_layers: int = 4
    hidden: int = 256
    n_speakers: int = 2
    scheme: str = "decomposed"
    sample_rate_hz: int = 8000
    win_ms: float = 32.0
    hop_ms: float = 8.0
    enc_norm: str = "cln"
    rnn_norm: str = "cln"

    def __post_init__(self):
        self.scheme = Scheme(self.scheme).value
        if self.n_layers < 1 or self.hidden < 1 or self.n_speakers < 1:
            raise ValueError("n_layers, hidden and n_speakers must be positive")
        _check_norm_choice("enc_norm", self.enc_norm)
        _check_norm_choice("rnn_norm", self.rnn_norm)

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.sample_rate_hz, self.win_ms, self.hop_ms)

    @property
    def n_bins(self) -> int:
        return self.stft.n_bins

    @classmethod
    def full(cls, scheme: str = "decomposed") -> "FdModelConfig":
        return cls(n_layers=4, hidden=256, scheme=scheme, sample_rate_hz=16000)

    @classmethod
    def desk(cls, scheme: str = "decomposed") -> "FdModelConfig":
        return cls(n_layers=2, hidden=32, scheme=scheme, sample_rate_hz=8000)


@dataclass
class TdModelConfig:
    n_blocks: int = 6
    hidden: int = 128
    n_kernels: int = 64
    chunk: int = 100
    n_speakers: int = 2
    scheme: str = "decomposed"
    sample_rate_hz: int = 8000
    win_ms: float = 2.0
    enc_norm: str = "cln"
    rnn_norm: str = "cln"

    def __post_init__(self):
        self.scheme = Scheme(self.scheme).value
        if self.n_blocks < 1 or self.hidden < 1 or self.n_kernels < 1 or self.n_speakers < 1:
            raise ValueError("n_blocks, hidden, n_kernels and n_speakers must be positive")
        if self.chunk < 2 or self.chunk % 2:
            raise ValueError("chunk must be an even number of frames (50% overlap)")
        _check_norm_choice("enc_norm", self.enc_norm)
        _check_norm_choice("rnn_norm", self.rnn_norm)

    @property
    def kernel_len(self) -> int:
        return int(round(self.win_ms * self.sample_rate_hz / 1000))

    @property
    def stride(self) -> int:
        return self.kernel_len // 2

    @property
    def hop_ms(self) -> float:
        return self.win_ms / 2

    @classmethod
    def full(cls, scheme: str = "decomposed") -> "TdModelConfig":
        return cls(n_blocks=6, hidden=128, chunk=100, scheme=scheme, sample_rate_hz=16000)

    @classmethod
    def desk(cls, scheme: str = "decomposed") -> "TdModelConfig":
        return cls(n_blocks=2, hidden=32, n_kernels=64, chunk=20, scheme=scheme, sample_rate_hz=8000)


class SeparationModel:
    kind = ""

    def named_parameters(self):
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    @property
    def scheme(self) -> Scheme:
        return Scheme(self.config.scheme)

    def supports(self, path) -> bool:
        return _path(path) is PathSelector.OFFLINE or self.scheme is not Scheme.STANDARD

    def _check_path(self, path) -> PathSelector:
        path = _path(path)
        if path is PathSelector.ONLINE:
            if self.scheme is Scheme.STANDARD:
                raise PathError("a standard-scheme model has no online path")
            if self.config.enc_norm == "gln" or self.config.rnn_norm == "gln":
                raise PathError("the online path needs cLN normalization (gLN reads future frames)")
        return path

    def __call__(self, wav, path) -> Tensor:
        return self.forward(wav, path)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise CheckpointError(f"parameter names differ: {sorted(set(own) ^ set(state))}")
        for k, t in own.items():
            if t.shape != state[k].shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} does not match {t.shape}")
        for k, t in own.items():
            t.data = np.array(state[k], dtype=t.dtype)


def _mask_head(head: FcParams, feat: Tensor, n_speakers: int) -> Tensor:
    """(..., K, N) -> ReLU masks (..., S, K, N)."""
    n = feat.shape[-1]
    masks = relu(fc_forward(head, feat))
    masks = reshape(masks, feat.shape[:-1] + (n_speakers, n))
    nd = masks.ndim
    lead = tuple(range(nd - 3))
    return transpose(masks, lead + (nd - 2, nd - 3, nd - 1))


class FdModel(SeparationModel):
    kind = "fd"

    def __init__(self, config: FdModelConfig, enc_norm: NormParams, blocks: list[DualBlockParams], head: FcParams):
        self.config = config
        self.enc_norm = enc_norm
        self.blocks = blocks
        self.head = head

    @classmethod
    def init(cls, config: FdModelConfig, seed: int = 0, dtype=np.float32) -> "FdModel":
        rng = Rng(seed)
        n = config.n_bins
        blocks = [
            DualBlockParams.init(n, config.hidden, config.scheme, rng, config.rnn_norm, dtype)
            for _ in range(config.n_layers)
        ]
        head = FcParams.init(n, config.n_speakers * n, rng, dtype)
        return cls(config, NormParams.init(n, dtype=dtype), blocks, head)

    def named_parameters(self):
        yield from self.enc_norm.named_parameters("enc_norm.")
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"blocks.{i}.")
        yield from self.head.named_parameters("head.")

    def forward(self, wav, path) -> Tensor:
        """(T,) or (B, T) mixture -> (S, T) or (B, S, T) estimates."""
        path = self._check_path(path)
        stft = self.config.stft
        wav = np.asarray(wav.data if isinstance(wav, Tensor) else wav, dtype=self.dtype)
        T = wav.shape[-1]
        win, hop = stft.win_length, stft.hop_length
        front = win - hop
        body = front + T + (win - hop)
        total = win + max(0, -(-(body - win) // hop)) * hop
        padded = np.pad(wav, [(0, 0)] * (wav.ndim - 1) + [(front, total - front - T)])
        mag_feat, phase = stft_analyze(stft, padded)
        mag = mag_feat.values
        feat = encoder_norm(self.enc_norm, mag, self.config.enc_norm)
        feat = stack_forward(self.blocks, feat, path)
        masks = _mask_head(self.head, feat, self.config.n_speakers)
        lead = mag.shape[:-2]
        est = mul(masks, reshape(mag, lead + (1,) + mag.shape[-2:]))
        phase = phase.reshape(lead + (1,) + phase.shape[-2:])
        out = istft_synthesize(stft, est, phase)
        return slice_(out, (Ellipsis, slice(front, front + T)))

    def latency_samples(self) -> int:
        return self.config.stft.win_length


class TdModel(SeparationModel):
    kind = "td"

    def __init__(
        self,
        config: TdModelConfig,
        codec: ConvCodecParams,
        enc_norm: NormParams,
        blocks: list[DprnnBlockParams],
        head: FcParams,
    ):
        self.config = config
        self.codec = codec
        self.enc_norm = enc_norm
        self.blocks = blocks
        self.head = head

    @classmethod
    def init(cls, config: TdModelConfig, seed: int = 0, dtype=np.float32) -> "TdModel":
        rng = Rng(seed)
        n = config.n_kernels
        codec = ConvCodecParams.init(config.sample_rate_hz, rng, n, config.win_ms, dtype)
        blocks = [
            DprnnBlockParams.init(n, config.hidden, config.scheme, rng, dtype, inter_norm=config.rnn_norm)
            for _ in range(config.n_blocks)
        ]
        head = FcParams.init(n, config.n_speakers * n, rng, dtype)
        return cls(config, codec, NormParams.init(n, dtype=dtype), blocks, head)

    def named_parameters(self):
        yield from self.codec.named_parameters("codec.")
        yield from self.enc_norm.named_parameters("enc_norm.")
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"blocks.{i}.")
        yield from self.head.named_parameters("head.")

    def forward(self, wav, path) -> Tensor:
        """(T,) or (B, T) mixture -> (S, T) or (B, S, T) estimates."""
        path = self._check_path(path)
        cfg = self.config
        wav = np.asarray(wav.data if isinstance(wav, Tensor) else wav, dtype=self.dtype)
        T = wav.shape[-1]
        L, s = cfg.kernel_len, cfg.stride
        total = L + max(0, -(-(T - L) // s)) * s
        padded = np.pad(wav, [(0, 0)] * (wav.ndim - 1) + [(0, total - T)])
        enc = conv_encode(self.codec, padded)
        feat = encoder_norm(self.enc_norm, enc, cfg.enc_norm)
        chunks = chunk_split(feat, cfg.chunk, cfg.chunk // 2)
        for block in self.blocks:
            chunks = dprnn_block_forward(block, chunks, path)
        merged = chunk_merge(chunks)
        masks = _mask_head(self.head, merged, cfg.n_speakers)
        lead = enc.shape[:-2]
        est = mul(masks, reshape(enc, lead + (1,) + enc.shape[-2:]))
        out = conv_decode(self.codec, est)
        return slice_(out, (Ellipsis, slice(0, T)))

    def latency_samples(self) -> int:
        return self.config.chunk * self.config.stride + self.config.kernel_len


MODEL_KINDS = {"fd": (FdModel, FdModelConfig), "td": (TdModel, TdModelConfig)}


def make_config(kind: str, values: dict):
    try:
        config_cls = MODEL_KINDS[kind][1]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None
    known = {f.name for f in dataclasses.fields(config_cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {kind} config keys: {sorted(unknown)}")
    return config_cls(**values)


def build_model(kind: str, config, seed: int = 0, dtype=np.float32) -> SeparationModel:
    model_cls, config_cls = MODEL_KINDS[kind]
    if isinstance(config, dict):
        config = make_config(kind, config)
    if not isinstance(config, config_cls):
        raise TypeError(f"{kind} model needs a {config_cls.__name__}")
    return model_cls.init(config, seed, dtype)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    offset: int  # bytes into the payload

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * 4


@dataclass
class Checkpoint:
    """Named-parameter manifest plus a little-endian float32 payload."""

    kind: str
    config: dict
    entries: list[ManifestEntry]
    payload: bytes
    metadata: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SeparationModel, metadata: dict | None = None) -> "Checkpoint":
        entries, chunks, offset = [], [], 0
        for name, t in model.named_parameters():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            entries.append(ManifestEntry(name, tuple(t.shape), offset))
            chunks.append(raw)
            offset += len(raw)
        return cls(model.kind, dataclasses.asdict(model.config), entries, b"".join(chunks), dict(metadata or {}))

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_kind": self.kind,
            "config": self.config,
            "dtype": "float32-le",
            "tensors": [{"name": e.name, "shape": list(e.shape), "offset": e.offset} for e in self.entries],
            "metadata": self.metadata,
        }

    def state(self) -> dict[str, np.ndarray]:
        expected = 0
        for e in sorted(self.entries, key=lambda e: e.offset):
            if e.offset != expected:
                raise CheckpointError(f"{e.name}: offset {e.offset} leaves a gap or overlap (expected {expected})")
            expected += e.nbytes
        if expected != len(self.payload):
            raise CheckpointError(f"payload has {len(self.payload)} bytes, manifest describes {expected}")
        return {
            e.name: np.frombuffer(self.payload, dtype="<f4", count=e.nbytes // 4, offset=e.offset)
            .reshape(e.shape)
            .astype(np.float32)
            for e in self.entries
        }

    def to_model(self, dtype=np.float32) -> SeparationModel:
        model = build_model(self.kind, dict(self.config), dtype=dtype)
        model.load_state_dict(self.state())
        return model


def save_checkpoint(model_or_ckpt, path, metadata: dict | None = None) -> Path:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt, metadata)
    if metadata and isinstance(model_or_ckpt, Checkpoint):
        ckpt.metadata.update(metadata)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "weights.bin").write_bytes(ckpt.payload)
    (out / "manifest.json").write_text(json.dumps(ckpt.manifest(), indent=2, sort_keys=True))
    return out


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        payload = (path / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint directory: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    try:
        if manifest["format_version"] != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {manifest['format_version']}")
        entries = [ManifestEntry(t["name"], tuple(int(d) for d in t["shape"]), int(t["offset"])) for t in manifest["tensors"]]
        return Checkpoint(manifest["model_kind"], manifest["config"], entries, payload, manifest.get("metadata", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt manifest: {exc!r}") from None


def load_checkpoint(path, dtype=np.float32) -> SeparationModel:
    """Rebuild the model; raises CheckpointError before any model is returned."""
    ckpt = read_checkpoint(path)
    try:
        return ckpt.to_model(dtype)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint config does not build a model: {exc}") from None


def init_from_offline(source, scheme, seed: int = 0, target_config: dict | None = None) -> SeparationModel:
    """Build a dual-path model of ``scheme`` initialized from an offline model.

    Every parameter present in the source is copied; a decomposed target
    additionally gets freshly initialized online FC layers. ``source`` is a
    Checkpoint, a checkpoint directory, or a model.
    """
    if isinstance(source, SeparationModel):
        source = Checkpoint.from_model(source)
    elif not isinstance(source, Checkpoint):
        source = read_checkpoint(source)
    config = dict(source.config)
    if target_config:
        mismatch = {k: (config.get(k), v) for k, v in target_config.items() if k != "scheme" and config.get(k) != v}
        if mismatch:
            raise CheckpointError(f"target config differs from the checkpoint in {mismatch}")
    config["scheme"] = Scheme(scheme).value if not isinstance(scheme, Scheme) else scheme.value
    model = build_model(source.kind, config, seed=seed)
    state = source.state()
    own = dict(model.named_parameters())
    for name, value in state.items():
        if name not in own:
            raise CheckpointError(f"checkpoint tensor {name} has no place in a {config['scheme']} model")
        if own[name].shape != value.shape:
            raise CheckpointError(f"{name}: shape {value.shape} does not match {own[name].shape}")
    for name, value in state.items():
        own[name].data = value.astype(own[name].dtype)
    return model
