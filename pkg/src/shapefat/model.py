"""Dual-view residual regressor with the four-channel attention module.

Backbone: one conv-BN-ReLU input phase per view, channel concat, residual
stages, global average pooling and two fully connected layers (the shared
head). The attention module gates the backbone features with K sigmoid
maps; its regression component reuses the shared head and its
classification component has one scalar logit per attention channel.
Only the backbone runs at prediction time.
"""
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import (
    BatchNormState,
    ParamSet,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    flatten,
    fully_connected,
    global_avg_pool,
    load_arrays,
    mean_of,
    mse_loss,
    mul_broadcast,
    no_grad,
    relu,
    save_arrays,
    scale,
    sigmoid,
    softmax_cross_entropy,
    take_channel,
    weighted_sum,
)
from .pipeline import FatCalib, fat_to_grade

N_GRADES = 4
VARIANTS = ("plain_backbone", "baseline", "proposed", "mlp")
VARIANT_ALIASES = {"plain": "plain_backbone", "resnet": "plain_backbone"}


def canonical_variant(name):
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return name


@dataclass(frozen=True)
class LossWeights:
    reg: float = 1.0       # lambda1, backbone regression
    att_reg: float = 0.5   # alpha1, attention regression component
    att_cls: float = 0.5   # alpha2, attention classification component

    @classmethod
    def parse(cls, text):
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 3:
            raise ValueError(f"loss weights need 3 values 'l1,a1,a2', got {text!r}")
        return cls(*vals)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    phase_channels: int = 8
    phase_stride: int = 2
    stage_channels: tuple = (16, 32, 64)
    stage_strides: tuple = (2, 2, 2)
    blocks_per_stage: int = 2
    fc_hidden: int = 32
    attention_channels: int = N_GRADES
    dense_gain: float = 1.0   # fully connected init bound is sqrt(gain / fan_in)
    variant: str = "proposed"
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if self.attention_channels != N_GRADES:
            raise ValueError(f"attention channels must equal the number of grades ({N_GRADES})")
        if len(self.stage_channels) != len(self.stage_strides) or not self.stage_channels:
            raise ValueError("stage_channels and stage_strides must be non-empty and equally long")
        if min(self.stage_channels) < 1 or self.phase_channels < 1 or self.fc_hidden < 1:
            raise ValueError("channel counts must be positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8")

    @property
    def has_attention(self):
        return self.variant in ("baseline", "proposed")

    @property
    def has_classifier(self):
        return self.variant == "proposed"

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_strides"] = list(self.stage_strides)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    params: ParamSet
    bn: dict
    trained: bool = False
    # the head regresses (fat - target_mean) / target_scale; outputs stay in percent
    target_mean: float = 0.0
    target_scale: float = 1.0

    def attention_names(self):
        return [n for n in self.params.names() if n.startswith(("att.", "cls"))]

    def backbone_names(self):
        att = set(self.attention_names())
        return [n for n in self.params.names() if n not in att]


@dataclass
class ModelOutputs:
    fat_pred: Tensor
    f_res: Tensor = None
    v_gap: Tensor = None
    att_maps: list = field(default_factory=list)
    f_att: list = field(default_factory=list)
    att_fat_pred: Tensor = None
    grade_logits: Tensor = None


def _uniform(rng, shape, fan_in, gain):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _block_plan(config):
    """(prefix, in_ch, out_ch, stride) for every residual block."""
    plan = []
    ch = 2 * config.phase_channels
    for s, (out, stride) in enumerate(zip(config.stage_channels, config.stage_strides)):
        for b in range(config.blocks_per_stage):
            plan.append((f"s{s}b{b}", ch, out, stride if b == 0 else 1))
            ch = out
    return plan


def feature_size(config):
    size = (config.input_size + 2 - 3) // config.phase_stride + 1
    for stride in config.stage_strides:
        size = (size + 2 - 3) // stride + 1
    return size


def build_model(config, seed=0, dtype=np.float32):
    """Fresh parameters for ``config``; weights fan-in uniform, biases 0, gamma 1, beta 0."""
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    bn = {}

    def conv(name, k, c, ksize, gain=6.0):
        ps.add(name, _uniform(rng, (k, c, ksize, ksize), c * ksize * ksize, gain).astype(dtype))

    def norm(name, c):
        ps.add(f"{name}.gamma", np.ones(c, dtype))
        ps.add(f"{name}.beta", np.zeros(c, dtype))
        bn[name] = BatchNormState.zeros(c)

    def dense(name, d, m, gain):
        ps.add(f"{name}.w", _uniform(rng, (d, m), d, gain).astype(dtype))
        ps.add(f"{name}.b", np.zeros(m, dtype))

    if config.variant == "mlp":
        dense("fc1", 2 * config.input_size ** 2, config.fc_hidden, config.dense_gain)
        dense("fc2", config.fc_hidden, 1, config.dense_gain)
        return ModelParams(config, ps, bn)

    for view in ("phase_f", "phase_l"):
        conv(f"{view}.conv.w", config.phase_channels, 1, 3)
        norm(f"{view}.bn", config.phase_channels)
    for prefix, cin, cout, stride in _block_plan(config):
        conv(f"{prefix}.conv1.w", cout, cin, 3)
        norm(f"{prefix}.bn1", cout)
        conv(f"{prefix}.conv2.w", cout, cout, 3)
        norm(f"{prefix}.bn2", cout)
        if stride != 1 or cin != cout:
            conv(f"{prefix}.proj.w", cout, cin, 1)
            norm(f"{prefix}.projbn", cout)
    feat = config.stage_channels[-1]
    dense("fc1", feat, config.fc_hidden, config.dense_gain)
    dense("fc2", config.fc_hidden, 1, config.dense_gain)
    if config.has_attention:
        conv("att.w", config.attention_channels, feat, 1, gain=3.0)
        ps.add("att.b", np.zeros(config.attention_channels, dtype))
    if config.has_classifier:
        for k in range(config.attention_channels):
            dense(f"cls{k}", feat, 1, config.dense_gain)
    return ModelParams(config, ps, bn)


def _as_input(maps, dtype):
    arr = np.asarray(maps, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr[:, None, :, :])


def _conv_bn(mp, prefix, bn_name, x, stride, train):
    p = mp.params
    pad = 1 if p[prefix].shape[-1] == 3 else 0
    y = conv2d(x, p[prefix], None, stride=stride, pad=pad)
    return batchnorm2d(y, p[f"{bn_name}.gamma"], p[f"{bn_name}.beta"], mp.bn[bn_name], train=train)


def _to_percent(mp, z):
    offset = Tensor(np.full(z.shape, mp.target_mean, dtype=z.dtype))
    return add(scale(z, mp.target_scale), offset)


def shared_head(mp, v):
    """The two fully connected layers shared by the backbone and attention regression."""
    p = mp.params
    h = relu(fully_connected(v, p["fc1.w"], p["fc1.b"]))
    return _to_percent(mp, fully_connected(h, p["fc2.w"], p["fc2.b"]))


def forward_backbone(mp, frontal, lateral, train=False):
    """Backbone path: returns ``(fat_pred N×1, F_res, V_GAP)``."""
    cfg = mp.config
    if cfg.variant == "mlp":
        raise ValueError("the mlp variant has no convolutional backbone; use forward_mlp")
    dtype = mp.params["fc1.w"].dtype
    xf = _as_input(frontal, dtype)
    xl = _as_input(lateral, dtype)
    s = cfg.input_size
    if xf.shape[2:] != (s, s) or xl.shape[2:] != (s, s) or xf.shape[0] != xl.shape[0]:
        raise ValueError(f"expected two batches of {s}x{s} maps, got {xf.shape[1:]} and {xl.shape[1:]}")
    f = relu(_conv_bn(mp, "phase_f.conv.w", "phase_f.bn", xf, cfg.phase_stride, train))
    l = relu(_conv_bn(mp, "phase_l.conv.w", "phase_l.bn", xl, cfg.phase_stride, train))
    x = concat_channels(f, l)
    for prefix, cin, cout, stride in _block_plan(cfg):
        h = relu(_conv_bn(mp, f"{prefix}.conv1.w", f"{prefix}.bn1", x, stride, train))
        h = _conv_bn(mp, f"{prefix}.conv2.w", f"{prefix}.bn2", h, 1, train)
        if f"{prefix}.proj.w" in mp.params:
            short = _conv_bn(mp, f"{prefix}.proj.w", f"{prefix}.projbn", x, stride, train)
        else:
            short = x
        x = relu(add(h, short))
    f_res = x
    v_gap = global_avg_pool(f_res)
    return shared_head(mp, v_gap), f_res, v_gap


def forward_attention(mp, f_res):
    """K sigmoid maps from a 1×1 projection, each multiplied into F_res."""
    if not mp.config.has_attention:
        raise ValueError("attention disabled for variant " + mp.config.variant)
    p = mp.params
    maps = sigmoid(conv2d(f_res, p["att.w"], p["att.b"]))
    att_maps = [take_channel(maps, k) for k in range(mp.config.attention_channels)]
    f_att = [mul_broadcast(f_res, m) for m in att_maps]
    return att_maps, f_att


def attention_heads(mp, f_att):
    """Regression component through the shared head; per-channel grade logits."""
    pooled = [global_avg_pool(f) for f in f_att]
    att_fat = shared_head(mp, mean_of(pooled))
    logits = None
    if mp.config.has_classifier:
        p = mp.params
        cols = [fully_connected(g, p[f"cls{k}.w"], p[f"cls{k}.b"]) for k, g in enumerate(pooled)]
        logits = concat_channels(*cols)
    return att_fat, logits


def forward_mlp(mp, frontal, lateral):
    p = mp.params
    dtype = p["fc1.w"].dtype
    x = concat_channels(flatten(_as_input(frontal, dtype)), flatten(_as_input(lateral, dtype)))
    h = relu(fully_connected(x, p["fc1.w"], p["fc1.b"]))
    return _to_percent(mp, fully_connected(h, p["fc2.w"], p["fc2.b"]))


def forward(mp, frontal, lateral, train=False):
    """Full training-time forward pass for any variant."""
    if mp.config.variant == "mlp":
        return ModelOutputs(fat_pred=forward_mlp(mp, frontal, lateral))
    fat, f_res, v_gap = forward_backbone(mp, frontal, lateral, train)
    out = ModelOutputs(fat_pred=fat, f_res=f_res, v_gap=v_gap)
    if mp.config.has_attention:
        out.att_maps, out.f_att = forward_attention(mp, f_res)
        out.att_fat_pred, out.grade_logits = attention_heads(mp, out.f_att)
    return out


def total_loss(outputs, fat_target, grade_target=None, weights=LossWeights(), target_scale=1.0):
    """``(L_total, L_reg, L_att_reg, L_att_cls)``; absent components are ``None``.

    L_total = reg * MSE(fat) + att_reg * MSE(att_fat) + att_cls * CE(grade logits).
    Squared errors are measured in units of ``target_scale`` percent, so the
    default of 1 gives plain percent-squared MSE.
    """
    fat_target = np.asarray(fat_target, dtype=np.float64)
    inv = 1.0 / float(target_scale) ** 2

    def mse(pred):
        loss = mse_loss(pred, fat_target)
        return loss if inv == 1.0 else scale(loss, inv)

    l_reg = mse(outputs.fat_pred)
    terms, ws = [l_reg], [weights.reg]
    l_att_reg = l_att_cls = None
    if outputs.att_fat_pred is not None:
        l_att_reg = mse(outputs.att_fat_pred)
        terms.append(l_att_reg)
        ws.append(weights.att_reg)
    if outputs.grade_logits is not None:
        g = np.asarray(grade_target)
        if grade_target is None or g.size == 0 or g.min() < 0 or g.max() >= N_GRADES:
            raise ValueError(f"grade targets must lie in 0..{N_GRADES - 1}")
        l_att_cls = softmax_cross_entropy(outputs.grade_logits, g)
        terms.append(l_att_cls)
        ws.append(weights.att_cls)
    return weighted_sum(terms, ws), l_reg, l_att_reg, l_att_cls


def attention_loss(l_att_reg, l_att_cls, weights=LossWeights()):
    """The attention module's combined loss, reported alongside the total."""
    total = 0.0
    if l_att_reg is not None:
        total += weights.att_reg * l_att_reg.item()
    if l_att_cls is not None:
        total += weights.att_cls * l_att_cls.item()
    return total


def predict_fat(mp, frontal, lateral):
    """Eval-mode backbone output in percent, shape (N,)."""
    if not mp.trained:
        raise RuntimeError("model has not been trained or loaded from a checkpoint")
    with no_grad():
        if mp.config.variant == "mlp":
            fat = forward_mlp(mp, frontal, lateral)
        else:
            fat, _, _ = forward_backbone(mp, frontal, lateral, train=False)
    return fat.data.reshape(-1)


def predict(mp, frontal, lateral, calib=FatCalib()):
    """Fat percentage and grade per subject; reads backbone parameters only."""
    fat = predict_fat(mp, frontal, lateral)
    grades = np.array([fat_to_grade(float(f), calib) for f in fat], dtype=np.int64)
    return fat, grades


def model_arrays(mp):
    arrays = dict(mp.params.arrays())
    for name, st in mp.bn.items():
        arrays[f"{name}.running_mean"] = st.running_mean
        arrays[f"{name}.running_var"] = st.running_var
    return arrays


def save_model(mp, path, extra=None):
    """Binary parameters at ``path`` plus a JSON sidecar ``path + '.json'``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_arrays(path, model_arrays(mp))
    meta = {
        "config": mp.config.to_dict(),
        "loss_weights": asdict(mp.config.loss_weights),
        "target_mean": float(mp.target_mean),
        "target_scale": float(mp.target_scale),
    }
    if extra:
        meta.update(extra)
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path + ".json") as f:
        meta = json.load(f)
    config = ModelConfig.from_dict(meta["config"])
    mp = build_model(config, seed=0)
    arrays = load_arrays(path)
    for name, t in mp.params.items():
        if name not in arrays or arrays[name].shape != t.shape:
            raise ValueError(f"checkpoint {path} lacks a matching entry for {name}")
        t.data = arrays[name].copy()
    for name, st in mp.bn.items():
        st.running_mean = arrays[f"{name}.running_mean"].astype(np.float64)
        st.running_var = arrays[f"{name}.running_var"].astype(np.float64)
        st.initialized = True
    mp.target_mean = float(meta.get("target_mean", 0.0))
    mp.target_scale = float(meta.get("target_scale", 1.0))
    mp.trained = True
    return mp
