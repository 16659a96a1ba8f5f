"""Symmetric convolutional encoder-decoder with skip connections.

Thirteen 3x3 layers, all stride 1 / padding 1, so any input size is
preserved: six encoder convolutions growing 1 -> 16 -> 32 -> 64 channels,
one 64 -> 64 bottleneck convolution, and six symmetric decoder transposed
convolutions back down to one channel.  Skip connections join every second
encoder output to its symmetric decoder stage: the stored encoder
activation is summed onto the decoder layer's output before that layer's
ReLU.  The final layer is linear; predictions are clamped to [0, 1] only
when the inference flag is set.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .netcore import (
    ConvLayerParams,
    ShapeError,
    Tape,
    conv2d_forward,
    deconv2d_forward,
    relu,
    skip_add,
)

# (mode, in_channels, out_channels) in execution order
LAYER_SPECS = [
    ("conv", 1, 16),
    ("conv", 16, 16),
    ("conv", 16, 32),
    ("conv", 32, 32),
    ("conv", 32, 64),
    ("conv", 64, 64),
    ("conv", 64, 64),      # bottleneck between encoder and decoder
    ("deconv", 64, 64),
    ("deconv", 64, 32),
    ("deconv", 32, 32),
    ("deconv", 32, 16),
    ("deconv", 16, 16),
    ("deconv", 16, 1),
]

# skip wiring: destination layer index -> source layer index (post-activation
# encoder output summed onto the destination layer's pre-activation output)
SKIP_WIRING = {7: 5, 9: 3, 11: 1}

ENCODER_LAYER_COUNT = 6
EXPECTED_PARAMETER_COUNT = 180_449

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint file is malformed, truncated, or of an unsupported version."""


class ModelConstructionError(RuntimeError):
    """Topology regression: the built model does not match the expected size."""


class EncoderDecoderModel:
    """Ordered layer list plus the skip wiring table."""

    def __init__(self, layers: list[ConvLayerParams]):
        if len(layers) != len(LAYER_SPECS):
            raise ModelConstructionError(
                f"expected {len(LAYER_SPECS)} layers, got {len(layers)}"
            )
        for layer, (mode, c_in, c_out) in zip(layers, LAYER_SPECS):
            if layer.mode != mode or layer.in_channels != c_in or layer.out_channels != c_out:
                raise ModelConstructionError(
                    f"layer {(layer.mode, layer.in_channels, layer.out_channels)} "
                    f"does not match spec {(mode, c_in, c_out)}"
                )
        self.layers = layers
        self.skip_wiring = dict(SKIP_WIRING)
        count = self.parameter_count()
        if count != EXPECTED_PARAMETER_COUNT:
            raise ModelConstructionError(
                f"parameter count {count} != expected {EXPECTED_PARAMETER_COUNT}"
            )

    def parameter_arrays(self) -> list[np.ndarray]:
        """Kernels and biases in declared layer order."""
        arrays = []
        for layer in self.layers:
            arrays.append(layer.kernels)
            arrays.append(layer.biases)
        return arrays

    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    def encoder_parameter_count(self) -> int:
        return sum(l.parameter_count for l in self.layers[:ENCODER_LAYER_COUNT])

    def forward(self, x: np.ndarray, tape: Tape | None = None,
                clamp: bool = False, use_skips: bool = True) -> np.ndarray:
        """Run the network.  Input must be single-channel (B, 1, H, W).

        With a tape, all operations are recorded for backward(); clamping is
        an inference-only step and is refused on a recording pass.
        """
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected single-channel input (B, 1, H, W), got {x.shape}")
        if clamp and tape is not None:
            raise ValueError("clamp is inference-only; never clamp a training pass")

        if tape is None:
            lay = lambda h, p: deconv2d_forward(h, p) if p.mode == "deconv" else conv2d_forward(h, p)
            act = relu
            add = skip_add
        else:
            lay = lambda h, p: tape.layer(h, p)
            act = tape.relu
            add = tape.add

        sources: dict[int, np.ndarray] = {}
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = lay(h, layer)
            if use_skips and i in self.skip_wiring:
                h = add(h, sources[self.skip_wiring[i]])
            if i < last:
                h = act(h)
                if i in SKIP_WIRING.values():
                    sources[i] = h
        if clamp:
            h = np.clip(h, 0.0, 1.0)
        return h


def build_model(seed: int, dtype=np.float32) -> EncoderDecoderModel:
    """Construct the network with seeded fan-based uniform initialization."""
    rng = np.random.default_rng(seed)
    layers = []
    for mode, c_in, c_out in LAYER_SPECS:
        limit = np.sqrt(6.0 / (9 * c_in + 9 * c_out))
        kernels = rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3)).astype(dtype)
        biases = np.zeros(c_out, dtype=dtype)
        layers.append(ConvLayerParams(kernels=kernels, biases=biases, mode=mode))
    return EncoderDecoderModel(layers)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------
# layout: magic "TSCK" | u32 LE version | u32 LE json length | json bytes |
# flat float32 LE parameter payload in declared layer order (kernels then
# biases per layer).  The json header carries the shape table and metadata.

def save_checkpoint(model: EncoderDecoderModel, path, metadata: dict | None = None) -> None:
    header = {
        "layers": [
            {"mode": l.mode, "in": l.in_channels, "out": l.out_channels}
            for l in model.layers
        ],
        "parameter_count": model.parameter_count(),
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate(
        [a.astype(np.float32).ravel() for a in model.parameter_arrays()]
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload.tobytes())


def load_checkpoint(path) -> tuple[EncoderDecoderModel, dict]:
    """Load a checkpoint; returns (model, metadata).  Rejects malformed files."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise CheckpointFormatError("truncated checkpoint header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from exc

    layer_specs = [(l["mode"], l["in"], l["out"]) for l in header["layers"]]
    expected = sum(9 * c_in * c_out + c_out for _, c_in, c_out in layer_specs)
    payload = blob[12 + header_len:]
    if len(payload) != expected * 4:
        raise CheckpointFormatError(
            f"payload holds {len(payload) // 4} values, expected {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)

    layers = []
    offset = 0
    for mode, c_in, c_out in layer_specs:
        k_size = 9 * c_in * c_out
        kernels = flat[offset:offset + k_size].reshape(c_out, c_in, 3, 3).copy()
        offset += k_size
        biases = flat[offset:offset + c_out].copy()
        offset += c_out
        layers.append(ConvLayerParams(kernels=kernels, biases=biases, mode=mode))
    return EncoderDecoderModel(layers), header.get("metadata", {})
