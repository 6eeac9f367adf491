"""Toy disparity and occlusion networks.

The disparity network is Siamese: one stack of stride-1 convs turns each
view into features, an optional normalization fixes their scale, a 1-D
correlation layer scores every disparity hypothesis, a couple of convs
regularize the score volume, and a softmax soft-argmin reads out a
subpixel disparity map.  Correlations are treated as matching scores
(higher = better), so the softmax runs with positive sign.

The occlusion network is a small fully-convolutional head over the
concatenation of [disparity / (D-1), right image, error map] with a
sigmoid output, shared between source and target batches.

Parameters live in an ordered {name: Tensor} dict; checkpoints serialize
it with a JSON header plus raw little-endian float64 blobs so identical
runs produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import costvol as cv
from .autodiff import Tensor

_CKPT_MAGIC = b"SADCKPT1"


@dataclass(frozen=True)
class StereoNetConfig:
    feature_channels: int = 16
    feature_layers: int = 3
    max_disparity: int = 16
    reg_layers: int = 2
    cost_norm: bool = True
    in_channels: int = 3

    def __post_init__(self):
        if self.max_disparity < 1:
            raise ValueError("max_disparity must be >= 1")
        if self.feature_layers < 1 or self.reg_layers < 1:
            raise ValueError("layer counts must be >= 1")


@dataclass(frozen=True)
class OcclusionNetConfig:
    in_channels: int = 5  # disparity + right image (3) + error map
    hidden_channels: int = 8
    layers: int = 3

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")


def _he_conv(rng, cout: int, cin: int, k: int) -> Tensor:
    fan_in = cin * k * k
    return Tensor(rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in))


def init_params(
    config: StereoNetConfig, seed: int, occ_config: OcclusionNetConfig | None = None
) -> dict:
    """He-scaled weights, zero biases, for both networks, one seed."""
    if occ_config is None:
        occ_config = OcclusionNetConfig()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    cin = config.in_channels
    for i in range(config.feature_layers):
        cout = config.feature_channels
        params[f"disp.feat.{i}.w"] = _he_conv(rng, cout, cin, 3)
        params[f"disp.feat.{i}.b"] = ad.zeros((1, cout, 1, 1))
        cin = cout
    d = config.max_disparity
    for i in range(config.reg_layers):
        params[f"disp.reg.{i}.w"] = _he_conv(rng, d, d, 3)
        params[f"disp.reg.{i}.b"] = ad.zeros((1, d, 1, 1))

    cin = occ_config.in_channels
    for i in range(occ_config.layers):
        cout = 1 if i == occ_config.layers - 1 else occ_config.hidden_channels
        params[f"occ.{i}.w"] = _he_conv(rng, cout, cin, 3)
        params[f"occ.{i}.b"] = ad.zeros((1, cout, 1, 1))
        cin = cout
    return params


def extract_features(image: Tensor, params: dict, config: StereoNetConfig) -> Tensor:
    """Stride-1 padded conv stack; applied identically to both views."""
    x = image
    for i in range(config.feature_layers):
        x = ad.conv2d(x, params[f"disp.feat.{i}.w"], params[f"disp.feat.{i}.b"], pad=1)
        x = ad.leaky_relu(x, 0.1)
    return x


def forward_disparity(
    i_l: Tensor,
    i_r: Tensor,
    params: dict,
    config: StereoNetConfig,
    feature_hook=None,
) -> Tensor:
    """Full left-view disparity prediction, (n, 1, h, w) in [0, D-1].

    feature_hook, when given, is applied to both feature maps right
    after extraction (instrumentation point for scale experiments).
    """
    if i_l.shape != i_r.shape:
        raise ValueError(f"image shape mismatch: {i_l.shape} vs {i_r.shape}")
    if i_l.shape[3] < config.max_disparity:
        raise ValueError(
            f"image width {i_l.shape[3]} smaller than max_disparity {config.max_disparity}"
        )
    fl = extract_features(i_l, params, config)
    fr = extract_features(i_r, params, config)
    if feature_hook is not None:
        fl, fr = feature_hook(fl), feature_hook(fr)
    if config.cost_norm:
        fl, fr = cv.cost_norm(fl), cv.cost_norm(fr)
    volume = cv.correlation_volume(fl, fr, config.max_disparity)
    x = volume.data
    for i in range(config.reg_layers):
        x = ad.conv2d(x, params[f"disp.reg.{i}.w"], params[f"disp.reg.{i}.b"], pad=1)
        if i < config.reg_layers - 1:
            x = ad.leaky_relu(x, 0.1)
    prob = ad.softmax_disparity(x, sign=1)
    n, dd, h, w = prob.shape
    idx = Tensor(np.arange(dd, dtype=np.float64).reshape(1, dd, 1, 1))
    weighted = prob * ad.expand(idx, prob.shape)
    return ad.reduce_sum(weighted, (1,))


def forward_occlusion(
    d: Tensor, i_r: Tensor, e: Tensor, params: dict, occ_config: OcclusionNetConfig, max_disparity: int
) -> Tensor:
    """Sigmoid occlusion probability from [d/(D-1), I_r, error map]."""
    scale = 1.0 / max(max_disparity - 1, 1)
    x = ad.concat_channels([d * scale, i_r, e])
    for i in range(occ_config.layers):
        x = ad.conv2d(x, params[f"occ.{i}.w"], params[f"occ.{i}.b"], pad=1)
        if i < occ_config.layers - 1:
            x = ad.leaky_relu(x, 0.1)
    return ad.sigmoid(x)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path,
    params: dict,
    configs: dict,
    adam: ad.Adam | None = None,
    extra: dict | None = None,
):
    """Write a byte-stable checkpoint.

    configs and extra must be JSON-serializable; parameter (and optimizer
    moment) arrays are appended as raw '<f8' blobs in header order.
    """
    names = list(params.keys())
    header = {
        "configs": configs,
        "params": [[n, list(params[n].shape)] for n in names],
        "adam": None,
        "extra": extra or {},
    }
    if adam is not None:
        header["adam"] = {
            "t": adam.t,
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
        }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())
        if adam is not None:
            for n in names:
                m = adam.m.get(n, np.zeros(params[n].shape))
                fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
            for n in names:
                v = adam.v.get(n, np.zeros(params[n].shape))
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict, ad.Adam | None, dict]:
    """Inverse of save_checkpoint: (params, configs, adam, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params: dict[str, Tensor] = {}
        for name, shape in header["params"]:
            shape = tuple(shape)
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            params[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        adam = None
        if header["adam"] is not None:
            a = header["adam"]
            adam = ad.Adam(params, lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
            adam.t = a["t"]
            for name, shape in header["params"]:
                shape = tuple(shape)
                count = int(np.prod(shape))
                adam.m[name] = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            for name, shape in header["params"]:
                shape = tuple(shape)
                count = int(np.prod(shape))
                adam.v[name] = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
    return params, header["configs"], adam, header["extra"]


def config_dicts(stereo: StereoNetConfig, occ: OcclusionNetConfig) -> dict:
    return {"stereo": asdict(stereo), "occlusion": asdict(occ)}


def stereo_config_from_dict(d: dict) -> StereoNetConfig:
    return StereoNetConfig(**d)


def occ_config_from_dict(d: dict) -> OcclusionNetConfig:
    return OcclusionNetConfig(**d)
