"""Network specification, construction, forward/gradient access, checkpoints.

Two families: a plain 3D CNN with an MLP head ("mlp"), and the same backbone
feeding a two-head self-attention layer before the MLP ("mhl"). The MLP is
always three dense layers with two dropout layers in between.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np


def _savez_deterministic(path, arrays):
    """np.savez with fixed zip timestamps so identical runs are byte-identical."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[key]))
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())

from ..errors import DimensionMismatchError, VoxelXaiError
from ..volume import Volume3D
from . import layers as L

FULL_CNN_CHANNELS = (64, 128, 256, 256, 256)
TWO_LEVEL_CHANNELS = (64, 128)

CONV_TAP = "conv_out"


def _scaled(channels, scale):
    return tuple(max(1, round(c * scale)) for c in channels)


@dataclass
class NetworkSpec:
    input_dims: tuple[int, int, int]  # (w, h, d)
    conv_channels: tuple[int, ...]
    use_batchnorm: bool = True
    head: str = "mlp"  # "mlp" | "mhl"
    mlp_widths: tuple[int, int] | None = None  # hidden widths; default (w*h, w*h)
    dropout_rates: tuple[float, float] = (0.2, 0.2)
    mhl_backbone: str = "two_level"  # "two_level" | "full_cnn"
    n_heads: int = 2
    d_k: int = 8
    d_v: int = 8
    n_classes: int = 2

    def __post_init__(self):
        if self.head not in ("mlp", "mhl"):
            raise VoxelXaiError(f"unknown head: {self.head!r}")
        if not self.conv_channels:
            raise VoxelXaiError("at least one conv level required")
        if self.mlp_widths is None:
            w, h, _ = self.input_dims
            self.mlp_widths = (w * h, w * h)
        self.input_dims = tuple(int(x) for x in self.input_dims)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.mlp_widths = tuple(int(x) for x in self.mlp_widths)

    @classmethod
    def simple_cnn(cls, input_dims, scale=1.0, **kw):
        """Five-level CNN; base filter counts (64, 128, 256, 256, 256) times scale."""
        return cls(input_dims, _scaled(FULL_CNN_CHANNELS, scale), head="mlp", **kw)

    @classmethod
    def simple_mhl(cls, input_dims, scale=1.0, **kw):
        """Five-level CNN backbone feeding the two-head attention layer."""
        return cls(
            input_dims,
            _scaled(FULL_CNN_CHANNELS, scale),
            head="mhl",
            mhl_backbone="full_cnn",
            **kw,
        )

    @classmethod
    def two_level_mhl(cls, input_dims, scale=1.0, **kw):
        """Two-level (64, 128 scaled) backbone feeding the attention layer."""
        return cls(
            input_dims,
            _scaled(TWO_LEVEL_CHANNELS, scale),
            head="mhl",
            mhl_backbone="two_level",
            **kw,
        )

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        for key in ("input_dims", "conv_channels", "mlp_widths", "dropout_rates"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


class Model:
    """A layer stack with a tapped activation (output of the last conv level)
    for attribution methods."""

    def __init__(self, spec: NetworkSpec, layer_list, tap_index: int):
        self.spec = spec
        self.layers = layer_list
        self.tap_index = tap_index

    # -- parameter access -------------------------------------------------
    def param_dict(self):
        out = {}
        for layer in self.layers:
            out.update(layer.param_dict())
        return out

    def grad_dict(self):
        out = {}
        for layer in self.layers:
            out.update(layer.grad_dict())
        return out

    def state_dict(self):
        out = dict(self.param_dict())
        for layer in self.layers:
            if hasattr(layer, "state_dict"):
                out.update(layer.state_dict())
        return out

    def load_state(self, state):
        for layer in self.layers:
            for key, arr in layer.param_dict().items():
                arr[...] = state[key]
            if hasattr(layer, "state_dict"):
                for key, arr in layer.state_dict().items():
                    arr[...] = state[key]

    def zero_grads(self):
        for g in self.grad_dict().values():
            g.fill(0.0)

    # -- passes ------------------------------------------------------------
    def forward_batch(self, X, train=False, rng=None, tap_override=None):
        """X: (n, d, h, w) volume batch -> (n, n_classes) logits."""
        a = X[:, None, :, :, :].astype(np.float64, copy=False)
        for i, layer in enumerate(self.layers):
            a = layer.forward(a, train=train, rng=rng)
            if i == self.tap_index:
                self.tap_activation = a
                if tap_override is not None:
                    a = tap_override
        return a

    def backward_batch(self, glogits, to_tap=False):
        g = glogits
        for i in range(len(self.layers) - 1, -1, -1):
            if to_tap and i == self.tap_index:
                return g
            g = self.layers[i].backward(g)
        return g

    # -- checkpoints ---------------------------------------------------------
    def save(self, path):
        path = Path(path)
        _savez_deterministic(path, self.state_dict())
        Path(str(path.with_suffix("")) + ".json").write_text(self.spec.to_json())

    @classmethod
    def load(cls, path, seed=0):
        path = Path(path)
        spec = NetworkSpec.from_json(
            Path(str(path.with_suffix("")) + ".json").read_text()
        )
        model = build_model(spec, np.random.default_rng(seed))
        with np.load(path) as data:
            model.load_state({k: data[k] for k in data.files})
        return model


def build_model(spec: NetworkSpec, rng) -> Model:
    w, h, d = spec.input_dims
    dims = [d, h, w]
    layer_list = []
    c_in = 1
    for lvl, c_out in enumerate(spec.conv_channels):
        layer_list.append(L.Conv3D(f"conv{lvl}", c_in, c_out, rng))
        layer_list.append(L.MaxPool3D())
        dims = [max(1, n // 2) if n >= 2 else n for n in dims]
        if spec.use_batchnorm:
            layer_list.append(L.BatchNorm3D(f"bn{lvl}", c_out))
        layer_list.append(L.ReLU())
        c_in = c_out
    tap_index = len(layer_list) - 1
    n_spatial = dims[0] * dims[1] * dims[2]

    if spec.head == "mhl":
        layer_list.append(L.ToSequence())
        layer_list.append(
            L.MultiHeadSelfAttention(
                "mha", c_in, spec.n_heads, spec.d_k, spec.d_v, rng
            )
        )
        layer_list.append(L.Flatten())
        n_feat = n_spatial * spec.n_heads * spec.d_v
    else:
        layer_list.append(L.Flatten())
        n_feat = n_spatial * c_in

    n1, n2 = spec.mlp_widths
    layer_list.append(L.Dense("fc0", n_feat, n1, rng))
    layer_list.append(L.ReLU())
    layer_list.append(L.Dropout("drop0", spec.dropout_rates[0]))
    layer_list.append(L.Dense("fc1", n1, n2, rng))
    layer_list.append(L.ReLU())
    layer_list.append(L.Dropout("drop1", spec.dropout_rates[1]))
    layer_list.append(L.Dense("fc2", n2, spec.n_classes, rng))
    return Model(spec, layer_list, tap_index)


def _check_dims(model, x: Volume3D):
    if x.dims != model.spec.input_dims:
        raise DimensionMismatchError(
            f"input dims {x.dims} != spec dims {model.spec.input_dims}"
        )


def forward(model: Model, x: Volume3D):
    """Single-input forward pass.

    Returns (logits, activations) where activations holds the final conv
    level's feature maps under the key "conv_out" as a (C, Z, Y, X) array.
    """
    _check_dims(model, x)
    logits = model.forward_batch(x.to_array()[None])
    return logits[0], {CONV_TAP: model.tap_activation[0]}


def mhl_forward(model: Model, x: Volume3D):
    if model.spec.head != "mhl":
        raise VoxelXaiError("model head is not mhl")
    logits, _ = forward(model, x)
    return logits


def grad_wrt_activation(model: Model, x: Volume3D, class_index: int, layer=CONV_TAP):
    """d(logit of class_index) / d(final conv activation), shape (C, Z, Y, X)."""
    if layer != CONV_TAP:
        raise VoxelXaiError(f"unknown activation layer: {layer!r}")
    _check_dims(model, x)
    logits = model.forward_batch(x.to_array()[None])
    glog = np.zeros_like(logits)
    glog[0, class_index] = 1.0
    model.zero_grads()
    return model.backward_batch(glog, to_tap=True)[0]


def class_logit_scorer(model: Model, class_index: int):
    """Batched scorer f: (n, d, h, w) -> (n,) returning the class evidence
    (the class logit minus the mean of the other logits, so a shared shift
    of all logits is ignored)."""

    def score(batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[None]
        logits = model.forward_batch(batch)
        others = (logits.sum(axis=1) - logits[:, class_index]) / (
            logits.shape[1] - 1
        )
        return logits[:, class_index] - others

    return score
