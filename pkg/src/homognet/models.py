"""Model archetypes and their training loops.

Four archetypes predict the Mandel conductivity vector from an RVE:

  vol        tiny dense net on the (standardized) volume fraction alone
  bnn        dense network on the 51 descriptors with an aleatoric head
             predicting a mean and standard deviation per component
  conv       generic convolutional network on the raw image
  inception  two deep inception modules plus a volume fraction bypass
  hybrid     volume bypass + feature regressor + inception branch, summed;
             trained with a five stage schedule
  hybrid_variable
             hybrid with one extra scaled phase-contrast input per branch

The prediction of a composite model is the plain sum of its branch
outputs; correction branches start with zero-initialized heads so they
contribute nothing until trained.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .neural import (
    AdamW,
    Parallel,
    Sequential,
    TrainConfig,
    build_layers,
    early_stop,
    mse_loss,
    rel_mse_loss,
)

MODEL_KINDS = ("vol", "bnn", "conv", "inception", "hybrid", "hybrid_variable")

SIGMA_FLOOR = 1e-4
BAYES_SHIFT = 0.25
CONTRAST_RANGE = (2.0, 100.0)
N_OUTPUTS = 3


def scale_contrast(R):
    """Map the inclusion conductivity 1/R linearly onto [0, 1].

    The effective tensor is a nearly linear function of the inclusion
    conductivity for fixed geometry, so conditioning on scaled 1/R keeps
    the network's contrast response well spread: R=2 maps to 1, R=100 to 0.
    """
    lo, hi = CONTRAST_RANGE
    k = 1.0 / np.asarray(R, dtype=float)
    return (k - 1.0 / hi) / (1.0 / lo - 1.0 / hi)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigma_from_raw(raw):
    """Positivity transform for the aleatoric head."""
    return softplus(raw) + SIGMA_FLOOR


def bayesian_loss(y, mu, sigma, s: float = BAYES_SHIFT):
    """Shifted negative log likelihood of a Gaussian prediction.

    phi = -log( 0.5 * N(y; mu, sigma^2) + s ), summed over the trailing
    component axis and averaged over any leading axes.  The shift s keeps
    the loss bounded by -log(s) for arbitrarily bad predictions.
    """
    y, mu, sigma = np.asarray(y, float), np.asarray(mu, float), np.asarray(sigma, float)
    if np.any(sigma <= 0):
        raise ConfigError("sigma must be positive")
    if s < 0:
        raise ConfigError("shift must be >= 0")
    z = (y - mu) / sigma
    pdf = np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * np.pi))
    phi = -np.log(0.5 * pdf + s)
    if phi.ndim == 0:
        return float(phi)
    return float(phi.sum(axis=-1).mean())


def _bayesian_value_grad(out, y, s: float = BAYES_SHIFT):
    """Loss and gradient w.r.t. the 6-wide network output (mu, raw sigma)."""
    mu, raw = out[:, :N_OUTPUTS], out[:, N_OUTPUTS:]
    sigma = sigma_from_raw(raw)
    z = (y - mu) / sigma
    pdf = np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * np.pi))
    denom = 0.5 * pdf + s
    loss = float(-np.log(denom).sum(axis=1).mean())
    n = out.shape[0]
    dphi_dpdf = -0.5 / denom / n
    dpdf_dmu = pdf * z / sigma
    dpdf_dsigma = pdf * (z * z - 1.0) / sigma
    dout = np.empty_like(out)
    dout[:, :N_OUTPUTS] = dphi_dpdf * dpdf_dmu
    dout[:, N_OUTPUTS:] = dphi_dpdf * dpdf_dsigma / (1.0 + np.exp(-raw))
    return loss, dout


def _loss_fn(kind: str):
    if kind == "mse":
        return mse_loss
    if kind == "rel_mse":
        return rel_mse_loss
    if kind == "bayesian":
        return _bayesian_value_grad
    raise ConfigError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# architecture builders


def build_vol_net(rng=None, extra_inputs: int = 0, zero_head: bool = False) -> Sequential:
    """Volume fraction bypass: Dense 34 (selu) - BN - Dense 3 (241 parameters)."""
    return build_layers(
        [
            {"kind": "dense", "in": 1 + extra_inputs, "out": 34, "activation": "selu"},
            {"kind": "batch_norm", "dim": 34},
            {"kind": "dense", "in": 34, "out": 3, "zero_init": zero_head},
        ],
        rng=rng,
    )


def _feature_trunk(input_dim: int):
    return [
        {"kind": "dense", "in": input_dim, "out": 45, "activation": "selu"},
        {"kind": "batch_norm", "dim": 45},
        {"kind": "dense", "in": 45, "out": 32, "activation": "selu"},
        {"kind": "batch_norm", "dim": 32},
        {"kind": "dense", "in": 32, "out": 25, "activation": "selu"},
        {"kind": "batch_norm", "dim": 25},
    ]


def build_bnn(input_dim: int = 51, rng=None) -> Sequential:
    """Feature regressor with an aleatoric head: output 6 = (mu, raw sigma) x 3."""
    return build_layers(
        _feature_trunk(input_dim) + [{"kind": "dense", "in": 25, "out": 6}], rng=rng
    )


def build_feature_net(input_dim: int = 51, rng=None, extra_inputs: int = 0, zero_head: bool = False) -> Sequential:
    """Deterministic feature regressor (the aleatoric head replaced by Dense 3)."""
    return build_layers(
        _feature_trunk(input_dim + extra_inputs) + [{"kind": "dense", "in": 25, "out": 3, "zero_init": zero_head}],
        rng=rng,
    )


GENERIC_CONV_STAGES = (
    {"kind": "avg_pool", "size": 2},
    {"kind": "conv", "kernel": 11, "stride": 4, "out_channels": 32},
    {"kind": "max_pool", "size": 2},
    {"kind": "conv", "kernel": 7, "stride": 3, "out_channels": 32},
    {"kind": "max_pool", "size": 2},
    {"kind": "conv", "kernel": 5, "stride": 3, "out_channels": 64},
    {"kind": "max_pool", "size": 2},
    {"kind": "conv", "kernel": 3, "stride": 2, "out_channels": 64},
    {"kind": "max_pool", "size": 2},
    {"kind": "conv", "kernel": 3, "stride": 2, "out_channels": 96},
    {"kind": "max_pool", "size": 2},
)


def _trace_spatial(specs, size: int):
    """Spatial size after each conv/pool stage (periodic, ceil semantics)."""
    sizes = []
    for s in specs:
        kind = s["kind"]
        if kind in ("conv",):
            size = -(-size // s.get("stride", 1))
        elif kind in ("avg_pool", "max_pool"):
            size = -(-size // s.get("stride", s["size"]))
        sizes.append(size)
    return sizes


def receptive_fields(specs):
    """Per-stage receptive field and stride product via kernel/stride composition."""
    report = []
    rf, jump = 1, 1
    for s in specs:
        kind = s["kind"]
        if kind == "conv":
            k, stride = s["kernel"], s.get("stride", 1)
        elif kind in ("avg_pool", "max_pool"):
            k = s["size"]
            stride = s.get("stride", k)
        else:
            report.append({"kind": kind, "receptive_field": rf, "downsampling": jump})
            continue
        rf += (k - 1) * jump
        jump *= stride
        report.append({"kind": kind, "receptive_field": rf, "downsampling": jump})
    return report


def build_generic_convnet(resolution: int, rng=None) -> Sequential:
    """Generic convolutional regressor scaled down from image resolution to 3 outputs."""
    if resolution < 16 or resolution % 2:
        raise ConfigError("generic conv net needs an even resolution >= 16")
    specs = []
    c_in = 1
    for s in GENERIC_CONV_STAGES:
        s = dict(s)
        if s["kind"] == "conv":
            s["in_channels"] = c_in
            s["activation"] = "selu"
            c_in = s["out_channels"]
        specs.append(s)
    sizes = _trace_spatial(specs, resolution)
    flat = sizes[-1] ** 2 * c_in
    specs += [
        {"kind": "flatten"},
        {"kind": "dense", "in": flat, "out": 100, "activation": "selu"},
        {"kind": "batch_norm", "dim": 100},
        {"kind": "dense", "in": 100, "out": 70, "activation": "selu"},
        {"kind": "batch_norm", "dim": 70},
        {"kind": "dense", "in": 70, "out": 50, "activation": "selu"},
        {"kind": "batch_norm", "dim": 50},
        {"kind": "dense", "in": 50, "out": 30, "activation": "selu"},
        {"kind": "dense", "in": 30, "out": 3},
    ]
    return build_layers(specs, rng=rng)


@dataclass(frozen=True)
class DeepInceptionSpec:
    """Parallel convolution branches concatenated channel-wise.

    Every branch must realize the same cumulative downsampling factor,
    otherwise the channel concatenation is rejected at build time.
    """

    branches: tuple

    def downsampling_factors(self):
        factors = []
        for branch in self.branches:
            f = 1
            for s in branch:
                if s["kind"] == "conv":
                    f *= s.get("stride", 1)
                elif s["kind"] in ("avg_pool", "max_pool"):
                    f *= s.get("stride", s["size"])
            factors.append(f)
        return factors

    def out_channels(self):
        total = 0
        for branch in self.branches:
            convs = [s for s in branch if s["kind"] == "conv"]
            total += convs[-1]["out_channels"] if convs else 1
        return total


def build_deep_inception(spec: DeepInceptionSpec, rng=None) -> Parallel:
    factors = spec.downsampling_factors()
    if len(set(factors)) != 1:
        raise ConfigError(f"branch downsampling factors differ: {factors}")
    return Parallel([build_layers(b, rng=rng) for b in spec.branches], mode="channel")


def desk_inception_modules(resolution: int) -> tuple[DeepInceptionSpec, DeepInceptionSpec]:
    """Two module layouts producing 8x8 maps: a fine branch convolving the raw
    image and a coarse branch starting with overlapping average pooling.

    At 128 pixels the branch receptive fields are 5 and 25 pixels with a
    common downsampling factor of 16.
    """
    if resolution % 16 == 0:
        def module(c1, c2):
            return DeepInceptionSpec(
                branches=(
                    (
                        {"kind": "conv", "kernel": 5, "in_channels": 1, "out_channels": c1,
                         "stride": 4, "activation": "selu"},
                        {"kind": "conv", "kernel": 1, "in_channels": c1, "out_channels": c2,
                         "stride": 4, "activation": "selu"},
                    ),
                    (
                        {"kind": "avg_pool", "size": 5, "stride": 2},
                        {"kind": "conv", "kernel": 3, "in_channels": 1, "out_channels": c1,
                         "stride": 2, "activation": "selu"},
                        {"kind": "conv", "kernel": 5, "in_channels": c1, "out_channels": c2,
                         "stride": 4, "activation": "selu"},
                    ),
                )
            )

        return module(8, 12), module(6, 10)
    if resolution % 4 == 0:
        # reduced layout for small test resolutions (downsampling 4)
        def module(c1, c2):
            return DeepInceptionSpec(
                branches=(
                    (
                        {"kind": "conv", "kernel": 5, "in_channels": 1, "out_channels": c2,
                         "stride": 4, "activation": "selu"},
                    ),
                    (
                        {"kind": "avg_pool", "size": 3, "stride": 2},
                        {"kind": "conv", "kernel": 3, "in_channels": 1, "out_channels": c2,
                         "stride": 2, "activation": "selu"},
                    ),
                )
            )

        return module(4, 6), module(4, 6)
    raise ConfigError("inception modules need a resolution divisible by 4")


def _inception_trunk_spec(resolution: int):
    m1, m2 = desk_inception_modules(resolution)
    factor = m1.downsampling_factors()[0]
    side = resolution // factor
    flat = side * side * (m1.out_channels() + m2.out_channels())
    trunk = [
        {
            "kind": "parallel",
            "mode": "flat",
            "branches": [
                [{"kind": "parallel", "mode": "channel", "branches": [list(b) for b in m1.branches]}],
                [{"kind": "parallel", "mode": "channel", "branches": [list(b) for b in m2.branches]}],
            ],
        }
    ]
    return trunk, flat


def _regressor_spec(n_in: int, zero_head: bool):
    return [
        {"kind": "dense", "in": n_in, "out": 32, "activation": "selu"},
        {"kind": "batch_norm", "dim": 32},
        {"kind": "dense", "in": 32, "out": 32, "activation": "selu"},
        {"kind": "batch_norm", "dim": 32},
        {"kind": "dense", "in": 32, "out": 16, "activation": "selu"},
        {"kind": "batch_norm", "dim": 16},
        {"kind": "dense", "in": 16, "out": 16, "activation": "selu"},
        {"kind": "batch_norm", "dim": 16},
        {"kind": "dense", "in": 16, "out": 3, "zero_init": zero_head},
    ]


# ---------------------------------------------------------------------------
# composite models (branch sum)


@dataclass
class Branch:
    name: str
    input_key: str  # vf | features | image
    stages: list  # one or two Sequential parts
    inject: str | None = None  # where the scaled contrast enters: input | between
    frozen: bool = False

    def params(self):
        return [p for s in self.stages for p in s.params()]

    def grads(self):
        return [g for s in self.stages for g in s.grads()]

    def state_arrays(self):
        return [a for s in self.stages for a in s.state_arrays()]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in self.params() + self.state_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class CompositeNet:
    """Sum of independent branches, each reading its own input tensor."""

    def __init__(self, branches: list[Branch], uses_contrast: bool = False):
        self.branches = {b.name: b for b in branches}
        self.order = [b.name for b in branches]
        self.uses_contrast = uses_contrast
        self._cache = {}

    def forward(self, inputs: dict, training: bool = False, active=None):
        active = set(self.order) if active is None else set(active)
        total = None
        self._cache = {}
        for name in self.order:
            if name not in active:
                continue
            b = self.branches[name]
            x = inputs[b.input_key]
            if self.uses_contrast and b.inject == "input":
                x = np.concatenate([x, inputs["contrast"]], axis=1)
            train_flag = training and not b.frozen
            h = b.stages[0].forward(x, training=train_flag)
            if len(b.stages) == 2:
                if self.uses_contrast and b.inject == "between":
                    h = np.concatenate([h, inputs["contrast"]], axis=1)
                    self._cache[name] = h.shape[1] - 1
                h = b.stages[1].forward(h, training=train_flag)
            total = h if total is None else total + h
        if total is None:
            raise ConfigError("no active branch")
        return total

    def backward(self, dout, trainable):
        for name in trainable:
            b = self.branches[name]
            if b.frozen:
                raise ConfigError(f"branch {name} is frozen")
            g = b.stages[-1].backward(dout)
            if len(b.stages) == 2:
                if name in self._cache:
                    g = g[:, : self._cache[name]]
                b.stages[0].backward(g)

    def trainable_params(self, trainable):
        return [p for n in trainable for p in self.branches[n].params()]

    def trainable_grads(self, trainable):
        return [g for n in trainable for g in self.branches[n].grads()]

    def params(self):
        return [p for n in self.order for p in self.branches[n].params()]

    def state_arrays(self):
        return [a for n in self.order for a in self.branches[n].state_arrays()]

    def spec(self):
        return {
            "kind": "composite",
            "uses_contrast": self.uses_contrast,
            "branches": [
                {
                    "name": b.name,
                    "input": b.input_key,
                    "inject": b.inject,
                    "stages": [s.spec()["layers"] for s in b.stages],
                }
                for b in (self.branches[n] for n in self.order)
            ],
        }


def build_composite(spec: dict, rng=None) -> CompositeNet:
    branches = [
        Branch(
            name=b["name"],
            input_key=b["input"],
            stages=[build_layers(s, rng=rng) for s in b["stages"]],
            inject=b.get("inject"),
        )
        for b in spec["branches"]
    ]
    return CompositeNet(branches, uses_contrast=spec.get("uses_contrast", False))


def build_inception_model(resolution: int, rng=None, variable: bool = False) -> CompositeNet:
    """Inception conv net plus a volume fraction bypass (branch outputs summed)."""
    trunk, flat = _inception_trunk_spec(resolution)
    extra = 1 if variable else 0
    conv = Branch(
        "conv",
        "image",
        [build_layers(trunk, rng=rng), build_layers(_regressor_spec(flat + extra, zero_head=True), rng=rng)],
        inject="between" if variable else None,
    )
    vol = Branch("vol", "vf", [build_vol_net(rng=rng, extra_inputs=extra)], inject="input" if variable else None)
    return CompositeNet([vol, conv], uses_contrast=variable)


def build_hybrid_model(resolution: int, input_dim: int = 51, rng=None, variable: bool = False) -> CompositeNet:
    """Hybrid: volume bypass + feature regressor + inception branch."""
    trunk, flat = _inception_trunk_spec(resolution)
    extra = 1 if variable else 0
    vol = Branch("vol", "vf", [build_vol_net(rng=rng, extra_inputs=extra)], inject="input" if variable else None)
    feat = Branch(
        "features",
        "features",
        [build_feature_net(input_dim, rng=rng, extra_inputs=extra, zero_head=True)],
        inject="input" if variable else None,
    )
    conv = Branch(
        "conv",
        "image",
        [build_layers(trunk, rng=rng), build_layers(_regressor_spec(flat + extra, zero_head=True), rng=rng)],
        inject="between" if variable else None,
    )
    return CompositeNet([vol, feat, conv], uses_contrast=variable)


# ---------------------------------------------------------------------------
# data plumbing and augmentation


@dataclass
class ModelData:
    """Training arrays shared by all archetypes.

    targets has shape (n, 3) for fixed contrast or (n, n_contrasts, 3) with
    the matching `contrasts` list for the variable extension.
    """

    features: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    images: np.ndarray | None = None
    contrasts: np.ndarray | None = None

    def resolution(self) -> int:
        if self.images is None:
            raise DataError("model data holds no images")
        return self.images.shape[1]


def augment_translate(batch: np.ndarray, fraction: float = 0.5, every: int = 10,
                      epoch: int = 0, rng=None) -> np.ndarray:
    """Randomly translate a fraction of the image batch on trigger epochs.

    Epochs are counted from 1; the batch is returned unchanged unless
    `epoch` is a positive multiple of `every`.  Translation wraps
    periodically, so the physical sample and its target are unchanged.
    """
    if every <= 0 or epoch <= 0 or epoch % every or fraction <= 0.0:
        return batch
    rng = rng or np.random.default_rng(0)
    n_img = batch.shape[0]
    n_sel = int(round(fraction * n_img))
    if n_sel == 0:
        return batch
    out = batch.copy()
    chosen = rng.choice(n_img, size=n_sel, replace=False)
    side = batch.shape[1]
    shifts = rng.integers(0, side, size=(n_sel, 2))
    for i, (dy, dx) in zip(chosen, shifts):
        out[i] = np.roll(batch[i], (int(dy), int(dx)), axis=(0, 1))
    return out


@dataclass(frozen=True)
class AugmentConfig:
    fraction: float = 0.5
    every: int = 10


def _gather_inputs(data: ModelData, rows, contrast_rows=None, needs=("features",)):
    """Assemble the input dict for a batch of sample rows."""
    inputs = {}
    if "features" in needs or "vf" in needs:
        feats = data.features[rows]
        inputs["features"] = feats
        inputs["vf"] = feats[:, :1]
    if "image" in needs:
        inputs["image"] = data.images[rows].astype(float)[..., None]
    if contrast_rows is not None:
        inputs["contrast"] = scale_contrast(data.contrasts[contrast_rows])[:, None]
    return inputs


def _expand_variable(data: ModelData, idx):
    """(sample, contrast) row pairs for the variable-contrast extension."""
    n_c = data.targets.shape[1]
    rows = np.repeat(idx, n_c)
    c_rows = np.tile(np.arange(n_c), len(idx))
    return rows, c_rows


@dataclass
class FitHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    epochs: int = 0

    def best_val(self) -> float:
        return float(min(self.val_loss))


def _branch_sum(model, names, data: ModelData, rows, c_rows, batch=256):
    """Summed inference-mode contribution of the named branches per row."""
    if not names:
        return None
    needs = {model.branches[n].input_key for n in names} | {"features"}
    out = np.zeros((len(rows), N_OUTPUTS))
    for start in range(0, len(rows), batch):
        sl = slice(start, start + batch)
        sub_c = c_rows[sl] if c_rows is not None else None
        inputs = _gather_inputs(data, rows[sl], sub_c, needs)
        out[sl] = model.forward(inputs, training=False, active=names)
    return out


def fit_composite(
    model: CompositeNet,
    data: ModelData,
    config: TrainConfig,
    rng,
    active=None,
    trainable=None,
    max_epochs=None,
    use_early_stop: bool = True,
    augment: AugmentConfig | None = None,
    stage_tag: str = "",
) -> FitHistory:
    """Minibatch loop over a composite model's active/trainable branches.

    Active branches outside the trainable set contribute constant
    inference-mode outputs, so their per-row contributions are computed
    once up front instead of re-running their forward pass every batch
    (image-input branches stay live while augmentation is on, since the
    translated frames change between batches).
    """
    active = list(model.order) if active is None else list(active)
    trainable = [n for n in active if not model.branches[n].frozen] if trainable is None else list(trainable)
    live = [n for n in active if n in trainable
            or (augment is not None and model.branches[n].input_key == "image")]
    cached = [n for n in active if n not in live]
    needs = {model.branches[n].input_key for n in live} | {"features"}
    loss_fn = _loss_fn(config.loss)
    max_epochs = config.max_epochs if max_epochs is None else max_epochs
    opt = AdamW(model.trainable_params(trainable), config)
    hist = FitHistory()

    variable = model.uses_contrast
    train_rows, train_c = (_expand_variable(data, data.train_idx) if variable
                           else (np.asarray(data.train_idx), None))
    val_rows, val_c = (_expand_variable(data, data.val_idx) if variable
                       else (np.asarray(data.val_idx), None))
    extra_train = _branch_sum(model, cached, data, train_rows, train_c)
    extra_val = _branch_sum(model, cached, data, val_rows, val_c)

    def val_loss():
        total = 0.0
        for start in range(0, len(val_rows), 256):
            sl = slice(start, start + 256)
            sub_c = val_c[sl] if val_c is not None else None
            inputs = _gather_inputs(data, val_rows[sl], sub_c, needs)
            y = data.targets[val_rows[sl], sub_c] if variable else data.targets[val_rows[sl]]
            out = model.forward(inputs, training=False, active=live)
            if extra_val is not None:
                out = out + extra_val[sl]
            loss, _ = loss_fn(out, y)
            total += loss * len(val_rows[sl])
        return total / max(len(val_rows), 1)

    arrays = lambda: [a for n in model.order for a in
                      (model.branches[n].params() + model.branches[n].state_arrays())]
    val0 = val_loss()
    hist.val_loss.append(val0)
    hist.train_loss.append(np.nan)
    best = [a.copy() for a in arrays()]
    best_val, best_epoch = val0, 0

    n_rows = len(train_rows)
    for epoch in range(1, max_epochs + 1):
        perm = rng.permutation(n_rows)
        running, seen = 0.0, 0
        for start in range(0, n_rows, config.batch_size):
            take = perm[start : start + config.batch_size]
            sub_c = train_c[take] if train_c is not None else None
            inputs = _gather_inputs(data, train_rows[take], sub_c, needs)
            if augment is not None and "image" in inputs:
                inputs["image"] = augment_translate(
                    inputs["image"], augment.fraction, augment.every, epoch, rng
                )
            y = data.targets[train_rows[take], sub_c] if variable else data.targets[train_rows[take]]
            out = model.forward(inputs, training=True, active=live)
            if extra_train is not None:
                out = out + extra_train[take]
            loss, dout = loss_fn(out, y)
            if not np.isfinite(loss):
                raise NumericError(f"{stage_tag or 'training'} diverged (non-finite loss)")
            model.backward(dout, trainable)
            opt.step(model.trainable_grads(trainable))
            running += loss * len(take)
            seen += len(take)
        hist.train_loss.append(running / seen)
        val = val_loss()
        hist.val_loss.append(val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best = [a.copy() for a in arrays()]
        if use_early_stop and early_stop(hist.val_loss, config.patience):
            break
    for a, s in zip(arrays(), best):
        a[...] = s
    hist.best_epoch = best_epoch
    hist.epochs = len(hist.val_loss) - 1
    return hist


@dataclass
class StageRecord:
    stage: int
    trained: list
    history: FitHistory

    def end_val(self) -> float:
        return self.history.best_val()


def multistage_train(
    model: CompositeNet,
    data: ModelData,
    config: TrainConfig,
    rng,
    stage2_epochs: int = 20,
    augment: AugmentConfig | None = AugmentConfig(),
    dense_config: TrainConfig | None = None,
) -> list[StageRecord]:
    """Five stage schedule for the hybrid model.

    1. volume branch alone to convergence, then frozen
    2. all branches contribute, feature + conv branches train a fixed
       small number of epochs
    3. feature branch trains to convergence, then frozen
    4. conv branch trains to convergence (features still contribute)
    5. feature branch unfrozen; everything except the volume branch
       fine-tunes to convergence

    Frozen branches contribute values but receive no gradients, and their
    parameters (including batch norm state) stay bitwise constant.  The
    dense-only stages (1 and 3) run with `dense_config` when given; dense
    epochs are orders of magnitude cheaper than convolutional ones and
    need far more of them to converge.
    """
    if set(model.order) != {"vol", "features", "conv"}:
        raise ConfigError("multistage training expects the three hybrid branches")
    dense_config = dense_config or config
    records = []

    def run(stage, active, trainable, cfg, max_epochs=None, early=True):
        hist = fit_composite(
            model, data, cfg, rng,
            active=active, trainable=trainable,
            max_epochs=max_epochs, use_early_stop=early,
            augment=augment if "conv" in trainable else None,
            stage_tag=f"stage {stage}",
        )
        records.append(StageRecord(stage=stage, trained=list(trainable), history=hist))

    run(1, active=["vol"], trainable=["vol"], cfg=dense_config)
    model.branches["vol"].frozen = True
    run(2, active=model.order, trainable=["features", "conv"], cfg=config,
        max_epochs=stage2_epochs, early=False)
    run(3, active=model.order, trainable=["features"], cfg=dense_config)
    model.branches["features"].frozen = True
    run(4, active=model.order, trainable=["conv"], cfg=config)
    model.branches["features"].frozen = False
    run(5, active=model.order, trainable=["features", "conv"], cfg=config)
    return records


# ---------------------------------------------------------------------------
# bundles: building, training and predicting by model kind


@dataclass
class ModelBundle:
    kind: str
    net: object  # Sequential or CompositeNet
    input_dim: int = 51
    resolution: int | None = None
    feature_indices: np.ndarray | None = None

    @property
    def uses_contrast(self) -> bool:
        return self.kind == "hybrid_variable" or getattr(self.net, "uses_contrast", False)

    def _features(self, features):
        if self.feature_indices is None:
            return features
        return features[:, self.feature_indices]

    def predict(self, features=None, images=None, contrast=None, batch: int = 256):
        """Deterministic prediction; the bnn kind returns (mu, sigma)."""
        n = len(features) if features is not None else len(images)
        if self.uses_contrast:
            if contrast is None:
                raise ConfigError("variable-contrast model needs a contrast input")
            c = np.broadcast_to(scale_contrast(contrast), (n,)).astype(float)[:, None]
        outs = []
        for start in range(0, n, batch):
            sl = slice(start, start + batch)
            if isinstance(self.net, CompositeNet):
                inputs = {}
                if features is not None:
                    inputs["features"] = self._features(features[sl])
                    inputs["vf"] = features[sl][:, :1]
                if images is not None:
                    inputs["image"] = images[sl].astype(float)[..., None]
                if self.uses_contrast:
                    inputs["contrast"] = c[sl]
                outs.append(self.net.forward(inputs, training=False))
            elif self.kind in ("vol", "bnn"):
                x = features[sl][:, :1] if self.kind == "vol" else self._features(features[sl])
                outs.append(self.net.forward(x, training=False))
            elif self.kind == "conv":
                outs.append(self.net.forward(images[sl].astype(float)[..., None], training=False))
            else:
                raise ConfigError(f"cannot predict with kind {self.kind!r}")
        out = np.concatenate(outs, axis=0)
        if self.kind == "bnn":
            return out[:, :N_OUTPUTS], sigma_from_raw(out[:, N_OUTPUTS:])
        return out


def build_model(kind: str, resolution: int | None = None, input_dim: int = 51, seed: int = 0) -> ModelBundle:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 101]))
    if kind == "vol":
        net = build_vol_net(rng=rng)
    elif kind == "bnn":
        net = build_bnn(input_dim, rng=rng)
    elif kind == "conv":
        net = build_generic_convnet(resolution, rng=rng)
    elif kind == "inception":
        net = build_inception_model(resolution, rng=rng)
    elif kind == "hybrid":
        net = build_hybrid_model(resolution, input_dim, rng=rng)
    elif kind == "hybrid_variable":
        net = build_hybrid_model(resolution, input_dim, rng=rng, variable=True)
    else:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    return ModelBundle(kind=kind, net=net, input_dim=input_dim, resolution=resolution)


def _fit_plain(net, x, y, xv, yv, config: TrainConfig, rng, loss_fn, augment=None) -> FitHistory:
    """Minibatch loop for single-input networks."""
    opt = AdamW(net.params(), config)
    hist = FitHistory()
    arrays = lambda: list(net.params()) + list(net.state_arrays())

    def val_loss():
        total = 0.0
        for start in range(0, len(xv), 256):
            out = net.forward(xv[start : start + 256], training=False)
            l, _ = loss_fn(out, yv[start : start + 256])
            total += l * len(xv[start : start + 256])
        return total / len(xv)

    v0 = val_loss()
    hist.val_loss.append(v0)
    hist.train_loss.append(np.nan)
    best, best_val, best_epoch = [a.copy() for a in arrays()], v0, 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(x))
        running = 0.0
        for start in range(0, len(x), config.batch_size):
            take = perm[start : start + config.batch_size]
            xb = x[take]
            if augment is not None and xb.ndim == 4:
                xb = augment_translate(xb, augment.fraction, augment.every, epoch, rng)
            out = net.forward(xb, training=True)
            loss, dout = loss_fn(out, y[take])
            if not np.isfinite(loss):
                raise NumericError("training diverged (non-finite loss)")
            net.backward(dout)
            opt.step(net.grads())
            running += loss * len(take)
        hist.train_loss.append(running / len(x))
        val = val_loss()
        hist.val_loss.append(val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best = [a.copy() for a in arrays()]
        if early_stop(hist.val_loss, config.patience):
            break
    for a, s in zip(arrays(), best):
        a[...] = s
    hist.best_epoch = best_epoch
    hist.epochs = len(hist.val_loss) - 1
    return hist


def train_model(
    bundle: ModelBundle,
    data: ModelData,
    config: TrainConfig,
    augment: AugmentConfig | None = None,
    stage2_epochs: int = 20,
    dense_config: TrainConfig | None = None,
):
    """Train a bundle on the given data; returns the fit/stage history."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFF, 202]))
    kind = bundle.kind
    tri, vai = data.train_idx, data.val_idx
    if kind in ("vol", "bnn"):
        feats = bundle._features(data.features)
        x = feats[:, :1] if kind == "vol" else feats
        loss = _loss_fn("bayesian" if kind == "bnn" else config.loss)
        return _fit_plain(net=bundle.net, x=x[tri], y=data.targets[tri],
                          xv=x[vai], yv=data.targets[vai], config=config, rng=rng,
                          loss_fn=loss)
    if kind == "conv":
        imgs = data.images.astype(float)[..., None]
        return _fit_plain(bundle.net, imgs[tri], data.targets[tri], imgs[vai],
                          data.targets[vai], config, rng, _loss_fn(config.loss),
                          augment=augment)
    if kind == "inception":
        return fit_composite(bundle.net, data, config, rng, augment=augment)
    if kind in ("hybrid", "hybrid_variable"):
        return multistage_train(bundle.net, data, config, rng,
                                stage2_epochs=stage2_epochs, augment=augment,
                                dense_config=dense_config)
    raise ConfigError(f"unknown model kind {kind!r}")
