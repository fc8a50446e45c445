"""Res-TCN and LSTM sub-networks joined by a fusion classifier.

A :class:`ModelBundle` owns a flat ``name -> array`` parameter dict plus the
running batch-norm statistics, and exposes explicit forward/backward passes
for each sub-network so the training loop can route loss gradients by hand.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndiff
from .ndiff import BatchNormState, ConvSpec

CHECKPOINT_FORMAT = "paresis-checkpoint"
CHECKPOINT_VERSION = 1
MODES = ("fused", "tcn", "lstm")
TASK_CLASSES = {"paretic": 2, "action": 9}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ResTcnConfig:
    filters: tuple[int, ...] = (8, 16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    kernel: int = 6
    subblocks: int = 3
    stem_filters: int = 8
    stem_kernel: int = 6

    def __post_init__(self):
        if len(self.filters) != len(self.strides):
            raise ConfigError("filters and strides must have one entry per residual unit")

    @property
    def min_length(self) -> int:
        return int(np.prod(self.strides))


@dataclass(frozen=True)
class LstmNetConfig:
    layers: int = 2
    hidden: int = 64
    dense_hidden: int = 32


def _uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ModelBundle:
    """Parameters and running statistics for one task.

    ``mode`` selects which heads exist: ``fused`` builds both sub-networks
    and the fusion classifier, ``tcn``/``lstm`` build one sub-network only.
    ``fusion_input`` picks whether the fusion head reads the concatenated
    penultimate features or the concatenated sub-network logits.
    """

    n_features: int
    n_classes: int
    window_len: int
    task: str | None = None
    mode: str = "fused"
    fusion_input: str = "features"
    tcn_config: ResTcnConfig = field(default_factory=ResTcnConfig)
    lstm_config: LstmNetConfig = field(default_factory=LstmNetConfig)
    class_names: tuple[str, ...] | None = None
    seed: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    bn: dict[str, BatchNormState] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fusion_input not in ("features", "logits"):
            raise ConfigError(f"fusion_input must be 'features' or 'logits', got {self.fusion_input!r}")
        if self.task is not None and TASK_CLASSES.get(self.task, self.n_classes) != self.n_classes:
            raise ConfigError(f"task {self.task!r} needs {TASK_CLASSES[self.task]} classes, got {self.n_classes}")
        if self.n_classes < 2 or self.n_features < 1:
            raise ConfigError("need at least 2 classes and 1 feature channel")
        if self.uses_tcn and self.window_len < self.tcn_config.min_length:
            raise ConfigError(
                f"window length {self.window_len} cannot survive the stride schedule "
                f"{self.tcn_config.strides}; need at least {self.tcn_config.min_length}")
        if self.class_names is not None:
            self.class_names = tuple(str(c) for c in self.class_names)
            if len(self.class_names) != self.n_classes:
                raise ConfigError("class_names must have n_classes entries")
        if not self.params:
            self._init_params(np.random.default_rng(self.seed))

    @property
    def uses_tcn(self) -> bool:
        return self.mode in ("fused", "tcn")

    @property
    def uses_lstm(self) -> bool:
        return self.mode in ("fused", "lstm")

    @property
    def output_head(self) -> str:
        return {"fused": "fusion", "tcn": "tcn", "lstm": "lstm"}[self.mode]

    # -- construction ------------------------------------------------------

    def _init_params(self, rng):
        p, n = self.params, self.n_classes
        if self.uses_tcn:
            cfg = self.tcn_config
            c_in = self.n_features
            p["tcn.stem.w"] = _uniform(rng, (cfg.stem_filters, cfg.stem_kernel, c_in), cfg.stem_kernel * c_in)
            p["tcn.stem.b"] = np.zeros(cfg.stem_filters)
            c_in = cfg.stem_filters
            for u, (f, s) in enumerate(zip(cfg.filters, cfg.strides)):
                for k in range(cfg.subblocks):
                    c = c_in if k == 0 else f
                    pre = f"tcn.u{u}.s{k}"
                    p[f"{pre}.bn.gamma"] = np.ones(c)
                    p[f"{pre}.bn.beta"] = np.zeros(c)
                    self.bn[pre] = BatchNormState.fresh(c)
                    p[f"{pre}.conv.w"] = _uniform(rng, (f, cfg.kernel, c), cfg.kernel * c)
                    p[f"{pre}.conv.b"] = np.zeros(f)
                if c_in != f or s != 1:
                    p[f"tcn.u{u}.proj.w"] = _uniform(rng, (f, 1, c_in), c_in)
                    p[f"tcn.u{u}.proj.b"] = np.zeros(f)
                c_in = f
            p["tcn.head.W"] = _uniform(rng, (c_in, n), c_in)
            p["tcn.head.b"] = np.zeros(n)
        if self.uses_lstm:
            cfg = self.lstm_config
            d, hid = self.n_features, cfg.hidden
            for k in range(cfg.layers):
                lim = 1.0 / np.sqrt(hid)
                p[f"lstm.l{k}.Wx"] = rng.uniform(-lim, lim, (d, 4 * hid))
                p[f"lstm.l{k}.Wh"] = rng.uniform(-lim, lim, (hid, 4 * hid))
                b = np.zeros(4 * hid)
                b[hid:2 * hid] = 1.0
                p[f"lstm.l{k}.b"] = b
                d = hid
            p["lstm.fc1.W"] = _uniform(rng, (hid, cfg.dense_hidden), hid)
            p["lstm.fc1.b"] = np.zeros(cfg.dense_hidden)
            p["lstm.fc2.W"] = _uniform(rng, (cfg.dense_hidden, n), cfg.dense_hidden)
            p["lstm.fc2.b"] = np.zeros(n)
        if self.mode == "fused":
            width = self.fusion_width
            p["fusion.W"] = _uniform(rng, (width, n), width)
            p["fusion.b"] = np.zeros(n)

    @property
    def tcn_feature_dim(self) -> int:
        return self.tcn_config.filters[-1]

    @property
    def lstm_feature_dim(self) -> int:
        return self.lstm_config.dense_hidden

    @property
    def fusion_width(self) -> int:
        if self.fusion_input == "logits":
            return 2 * self.n_classes
        return self.tcn_feature_dim + self.lstm_feature_dim

    def _conv_specs(self):
        cfg = self.tcn_config
        stem = ConvSpec(cfg.stem_filters, cfg.stem_kernel, 1)
        units = []
        for f, s in zip(cfg.filters, cfg.strides):
            units.append([ConvSpec(f, cfg.kernel, s if k == 0 else 1) for k in range(cfg.subblocks)])
        return stem, units

    def _check_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.n_features:
            raise ndiff.ShapeError(f"expected batch [B, T, {self.n_features}], got {x.shape}")
        return x

    # -- Res-TCN -----------------------------------------------------------

    def tcn_forward(self, x, train: bool = False):
        """Return ``(features[B,D], logits[B,N], cache)``."""
        x = self._check_batch(x)
        if x.shape[1] < self.tcn_config.min_length:
            raise ConfigError(f"window length {x.shape[1]} shorter than {self.tcn_config.min_length}")
        p, mode = self.params, "train" if train else "eval"
        stem_spec, unit_specs = self._conv_specs()
        a, stem_cache = ndiff.conv1d(x, p["tcn.stem.w"], p["tcn.stem.b"], stem_spec)
        unit_caches = []
        for u, specs in enumerate(unit_specs):
            sub_caches = []
            for k, spec in enumerate(specs):
                pre = f"tcn.u{u}.s{k}"
                h, bn_c = ndiff.batchnorm(a, p[f"{pre}.bn.gamma"], p[f"{pre}.bn.beta"], self.bn[pre], mode)
                r, mask = ndiff.relu(h)
                y, conv_c = ndiff.conv1d(r, p[f"{pre}.conv.w"], p[f"{pre}.conv.b"], spec)
                proj_c = None
                if k == 0 and f"tcn.u{u}.proj.w" in p:
                    skip, proj_c = ndiff.conv1d(a, p[f"tcn.u{u}.proj.w"], p[f"tcn.u{u}.proj.b"],
                                                ConvSpec(spec.filters, 1, spec.stride))
                else:
                    skip = a
                a = y + skip
                sub_caches.append((bn_c, mask, conv_c, proj_c))
            unit_caches.append(sub_caches)
        feats = a.mean(axis=1)
        logits, head_c = ndiff.dense(feats, p["tcn.head.W"], p["tcn.head.b"])
        return feats, logits, (stem_cache, unit_caches, head_c, a.shape)

    def tcn_backward(self, cache, dfeats=None, dlogits=None):
        """Return ``(dx, grads)``; either upstream gradient may be ``None``."""
        stem_cache, unit_caches, head_c, last_shape = cache
        grads: dict[str, np.ndarray] = {}
        dfeats = np.zeros(last_shape[::2]) if dfeats is None else dfeats.copy()
        if dlogits is not None:
            g = ndiff.dense_backward(dlogits, head_c)
            grads["tcn.head.W"], grads["tcn.head.b"] = g.params["W"], g.params["b"]
            dfeats += g.dx
        else:
            grads["tcn.head.W"] = np.zeros_like(self.params["tcn.head.W"])
            grads["tcn.head.b"] = np.zeros_like(self.params["tcn.head.b"])
        da = np.repeat(dfeats[:, None, :] / last_shape[1], last_shape[1], axis=1)
        for u in reversed(range(len(unit_caches))):
            for k in reversed(range(len(unit_caches[u]))):
                bn_c, mask, conv_c, proj_c = unit_caches[u][k]
                pre = f"tcn.u{u}.s{k}"
                g = ndiff.conv1d_backward(da, conv_c)
                grads[f"{pre}.conv.w"], grads[f"{pre}.conv.b"] = g.params["w"], g.params["b"]
                dr = ndiff.relu_backward(g.dx, mask).dx
                g = ndiff.batchnorm_backward(dr, bn_c)
                grads[f"{pre}.bn.gamma"], grads[f"{pre}.bn.beta"] = g.params["gamma"], g.params["beta"]
                dmain = g.dx
                if proj_c is not None:
                    g = ndiff.conv1d_backward(da, proj_c)
                    grads[f"tcn.u{u}.proj.w"], grads[f"tcn.u{u}.proj.b"] = g.params["w"], g.params["b"]
                    da = dmain + g.dx
                else:
                    da = dmain + da
        g = ndiff.conv1d_backward(da, stem_cache)
        grads["tcn.stem.w"], grads["tcn.stem.b"] = g.params["w"], g.params["b"]
        return g.dx, grads

    # -- LSTM network ------------------------------------------------------

    def lstm_forward(self, x, train: bool = False):
        """Return ``(features[B,dense_hidden], logits[B,N], cache)``."""
        x = self._check_batch(x)
        p = self.params
        seq, layer_caches = x, []
        for k in range(self.lstm_config.layers):
            pk = {n: p[f"lstm.l{k}.{n}"] for n in ("Wx", "Wh", "b")}
            seq, c = ndiff.lstm_forward(seq, pk)
            layer_caches.append(c)
        last = seq[:, -1]
        z, fc1_c = ndiff.dense(last, p["lstm.fc1.W"], p["lstm.fc1.b"])
        feats, mask = ndiff.relu(z)
        logits, fc2_c = ndiff.dense(feats, p["lstm.fc2.W"], p["lstm.fc2.b"])
        return feats, logits, (layer_caches, fc1_c, mask, fc2_c, seq.shape)

    def lstm_backward(self, cache, dfeats=None, dlogits=None):
        layer_caches, fc1_c, mask, fc2_c, seq_shape = cache
        grads: dict[str, np.ndarray] = {}
        dfeats = np.zeros(mask.shape) if dfeats is None else dfeats.copy()
        if dlogits is not None:
            g = ndiff.dense_backward(dlogits, fc2_c)
            grads["lstm.fc2.W"], grads["lstm.fc2.b"] = g.params["W"], g.params["b"]
            dfeats += g.dx
        else:
            grads["lstm.fc2.W"] = np.zeros_like(self.params["lstm.fc2.W"])
            grads["lstm.fc2.b"] = np.zeros_like(self.params["lstm.fc2.b"])
        dz = ndiff.relu_backward(dfeats, mask).dx
        g = ndiff.dense_backward(dz, fc1_c)
        grads["lstm.fc1.W"], grads["lstm.fc1.b"] = g.params["W"], g.params["b"]
        dseq = np.zeros(seq_shape)
        dseq[:, -1] = g.dx
        for k in reversed(range(len(layer_caches))):
            g = ndiff.lstm_backward(dseq, layer_caches[k])
            for n in ("Wx", "Wh", "b"):
                grads[f"lstm.l{k}.{n}"] = g.params[n]
            dseq = g.dx
        return dseq, grads

    # -- fusion ------------------------------------------------------------

    def fusion_forward(self, tcn_in, lstm_in):
        """Dense layer over ``concat(tcn_in, lstm_in)``; returns ``(logits, cache)``."""
        z = np.concatenate([tcn_in, lstm_in], axis=-1)
        if z.shape[-1] != self.params["fusion.W"].shape[0]:
            raise ndiff.ShapeError(
                f"fusion input width {z.shape[-1]} != stored weights {self.params['fusion.W'].shape}")
        logits, c = ndiff.dense(z, self.params["fusion.W"], self.params["fusion.b"])
        return logits, (c, tcn_in.shape[-1])

    def fusion_backward(self, dlogits, cache):
        c, split = cache
        g = ndiff.dense_backward(dlogits, c)
        return g.dx[..., :split], g.dx[..., split:], {"fusion.W": g.params["W"], "fusion.b": g.params["b"]}

    # -- whole bundle ------------------------------------------------------

    def forward(self, x, train: bool = False):
        """Logits of every active head, keyed ``tcn``/``lstm``/``fusion``."""
        logits, cache = {}, {}
        if self.uses_tcn:
            tf, logits["tcn"], cache["tcn"] = self.tcn_forward(x, train)
        if self.uses_lstm:
            lf, logits["lstm"], cache["lstm"] = self.lstm_forward(x, train)
        if self.mode == "fused":
            if self.fusion_input == "features":
                logits["fusion"], cache["fusion"] = self.fusion_forward(tf, lf)
            else:
                logits["fusion"], cache["fusion"] = self.fusion_forward(logits["tcn"], logits["lstm"])
        return logits, cache

    def backward(self, cache, dlogits):
        """Parameter gradients given loss gradients on each head's logits."""
        grads: dict[str, np.ndarray] = {}
        up = {"tcn": [None, dlogits.get("tcn")], "lstm": [None, dlogits.get("lstm")]}
        if "fusion" in cache and dlogits.get("fusion") is not None:
            dt, dl, g = self.fusion_backward(dlogits["fusion"], cache["fusion"])
            grads.update(g)
            slot = 0 if self.fusion_input == "features" else 1
            for name, d in (("tcn", dt), ("lstm", dl)):
                up[name][slot] = d if up[name][slot] is None else up[name][slot] + d
        elif "fusion" in cache:
            grads["fusion.W"] = np.zeros_like(self.params["fusion.W"])
            grads["fusion.b"] = np.zeros_like(self.params["fusion.b"])
        dx = 0.0
        if "tcn" in cache:
            d, g = self.tcn_backward(cache["tcn"], *up["tcn"])
            grads.update(g)
            dx = dx + d
        if "lstm" in cache:
            d, g = self.lstm_backward(cache["lstm"], *up["lstm"])
            grads.update(g)
            dx = dx + d
        return grads, dx

    def predict_logits(self, x, batch_size: int = 256):
        x = self._check_batch(x)
        head = self.output_head
        out = [self.forward(x[i:i + batch_size])[0][head] for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.n_classes))
        return np.concatenate(out)

    # -- state -------------------------------------------------------------

    def snapshot(self):
        return ({k: v.copy() for k, v in self.params.items()},
                {k: s.copy() for k, s in self.bn.items()})

    def restore(self, snap):
        params, bn = snap
        self.params = {k: v.copy() for k, v in params.items()}
        self.bn = {k: s.copy() for k, s in bn.items()}

    def header(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "task": self.task,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "window_len": self.window_len,
            "mode": self.mode,
            "fusion_input": self.fusion_input,
            "tcn_config": asdict(self.tcn_config),
            "lstm_config": asdict(self.lstm_config),
            "class_names": list(self.class_names) if self.class_names else None,
            "seed": self.seed,
            "bn_initialized": {k: s.initialized for k, s in self.bn.items()},
        }


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
# A zip of .npy members plus ``header.json``. Entries carry a fixed timestamp
# and sorted order so identical bundles produce identical bytes.

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf, name, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(bundle: ModelBundle, path, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in bundle.params.items()}
    for k, s in bundle.bn.items():
        arrays[f"bn/{k}/mean"] = s.running_mean
        arrays[f"bn/{k}/var"] = s.running_var
    header = bundle.header()
    header["extra"] = extra or {}
    header["arrays"] = {k: list(v.shape) for k, v in sorted(arrays.items())}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name], dtype=np.float64),
                                      allow_pickle=False)
            _zip_write(zf, name + ".npy", buf.getvalue())


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    """Return the bundle and the free-form ``extra`` dict stored with it."""
    with zipfile.ZipFile(path) as zf:
        if "header.json" not in zf.namelist():
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {header['version']} is newer than supported")
        arrays = {}
        for name, shape in header["arrays"].items():
            arr = np.lib.format.read_array(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
            if list(arr.shape) != shape:
                raise ValueError(f"{path}: array {name} has shape {arr.shape}, header says {shape}")
            arrays[name] = arr
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    bn = {}
    for key, init in header["bn_initialized"].items():
        bn[key] = BatchNormState(arrays[f"bn/{key}/mean"], arrays[f"bn/{key}/var"], init)
    tcn = header["tcn_config"]
    bundle = ModelBundle(
        n_features=header["n_features"],
        n_classes=header["n_classes"],
        window_len=header["window_len"],
        task=header["task"],
        mode=header["mode"],
        fusion_input=header["fusion_input"],
        tcn_config=ResTcnConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in tcn.items()}),
        lstm_config=LstmNetConfig(**header["lstm_config"]),
        class_names=header["class_names"],
        seed=header["seed"],
        params=params,
        bn=bn,
    )
    return bundle, header.get("extra", {})
