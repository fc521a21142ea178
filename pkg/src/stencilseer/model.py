"""The low-weight fully-convolutional encoder(-decoder).

Depth equals the order of the process being captured, widths equal the
operator counts per layer.  Each encoder layer is a bank of 2x2 kernels
applied as a valid cross-correlation with no bias; hidden layers take tanh,
the final encoder layer is linear, and the spatial axis is average-pooled
into two halves so the output aligns with the 2-row boundary-trace labels
(cropped by ``depth`` leading time columns to absorb valid-conv shrinkage).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .autodiff import (
    AdaDelta,
    GradTape,
    Kernel2x2,
    Scalar,
    Tensor3,
    append_product_channel,
    avg_pool_halves,
    concat_channels,
    conv2d_valid,
    mse,
    replicate_rows_halves,
    scalar_sum,
    tanh_map,
    transpose_conv2d,
    zero_sum_penalty,
)
from .errors import ConfigError, FormatError, ShapeError
from .pde import Dataset, Sample

FAMILY_DEFAULTS = {
    "hyperbolic": dict(depth=1, widths=(1,), coupling=False),
    "elliptic": dict(depth=2, widths=(1, 1), coupling=False),
    "parabolic": dict(depth=2, widths=(1, 1), coupling=False),
    "coupled": dict(depth=2, widths=(2, 2), coupling=True),
}


@dataclass(frozen=True)
class ModelConfig:
    family: str
    depth: int
    widths: tuple[int, ...]
    coupling: bool = False
    decoder: bool = False
    lambda_zs: float = 1e-2
    lambda_rec: float | None = None  # defaults to 1.0 when the decoder is on
    init: str = "random"             # "random" | "stencil"

    def __post_init__(self):
        if self.family not in FAMILY_DEFAULTS:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.depth < 1 or len(self.widths) != self.depth:
            raise ConfigError("need one positive width per layer")
        if any(k < 1 for k in self.widths):
            raise ConfigError("widths must be positive")
        if self.coupling and (self.in_channels < 2 or self.depth < 2):
            raise ConfigError("coupling needs >= 2 input channels and depth >= 2")
        if self.init not in ("random", "stencil"):
            raise ConfigError(f"unknown init mode {self.init!r}")
        if self.lambda_zs < 0:
            raise ConfigError("lambda_zs must be >= 0")

    @property
    def in_channels(self) -> int:
        return 2 if self.family == "coupled" else 1

    @property
    def rec_weight(self) -> float:
        if self.lambda_rec is not None:
            return self.lambda_rec
        return 1.0 if self.decoder else 0.0

    def layer_in_channels(self) -> list[int]:
        """Input channel count of each encoder layer."""
        cins = [self.in_channels]
        for l in range(1, self.depth):
            prev = self.widths[l - 1]
            if self.coupling and l == 1:
                prev += 1
            cins.append(prev)
        return cins

    def encoder_param_count(self) -> int:
        return sum(4 * cin * k for cin, k in zip(self.layer_in_channels(), self.widths))

    def decoder_channel_flow(self) -> list[int]:
        """Channel counts through the decoder, input first."""
        flow = [2 * self.widths[-1]]
        for l in range(self.depth - 1, 0, -1):
            flow.append(self.widths[l - 1])
        flow.append(self.in_channels)
        return flow


def default_config(family: str, **overrides) -> ModelConfig:
    """Per-family default architecture (depth = process order)."""
    kw = dict(FAMILY_DEFAULTS[family])
    kw.update(overrides)
    return ModelConfig(family=family, **kw)


class Model:
    """Kernel stacks plus fixed wiring; immutable during evaluation."""

    def __init__(self, config: ModelConfig, encoder, decoder=None):
        self.config = config
        self.encoder = encoder        # list of layers, each a list of Kernel2x2
        self.decoder = decoder

    def parameters(self) -> list[Kernel2x2]:
        params = [k for layer in self.encoder for k in layer]
        if self.decoder is not None:
            params += [k for layer in self.decoder for k in layer]
        return params

    def encoder_kernels(self) -> list[Kernel2x2]:
        return [k for layer in self.encoder for k in layer]

    def param_count(self) -> int:
        return sum(p.weights.size for p in self.parameters())


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Seeded-random init draws every weight uniformly from [-0.5, 0.5]."""
    rng = np.random.default_rng(seed)
    encoder = []
    for cin, k in zip(config.layer_in_channels(), config.widths):
        encoder.append([Kernel2x2(rng.uniform(-0.5, 0.5, (2, 2, cin))) for _ in range(k)])
    decoder = None
    if config.decoder:
        flow = config.decoder_channel_flow()
        decoder = []
        for d_in, d_out in zip(flow[:-1], flow[1:]):
            decoder.append(
                [Kernel2x2(rng.uniform(-0.5, 0.5, (2, 2, d_out))) for _ in range(d_in)]
            )
    model = Model(config, encoder, decoder)
    if config.init == "stencil":
        init_from_stencils(model)
    return model


class EncodeResult(NamedTuple):
    pre: list[Tensor3]    # conv (+ coupling) outputs before activation
    post: list[Tensor3]   # after activation (final layer is linear)
    pooled: Tensor3


def encode(model: Model, image: Tensor3, tape: GradTape | None = None) -> EncodeResult:
    """conv -> [product channel] -> tanh per hidden layer; linear final layer;
    then the spatial axis pools into two halves."""
    cfg = model.config
    if image.data.shape[2] != cfg.in_channels:
        raise ShapeError(
            f"model expects {cfg.in_channels} channel(s), image has {image.data.shape[2]}"
        )
    pre, post = [], []
    x = image
    for l, layer in enumerate(model.encoder):
        x = conv2d_valid(x, layer, tape)
        if cfg.coupling and l == 0:
            x = append_product_channel(x, tape)
        pre.append(x)
        if l < cfg.depth - 1:
            x = tanh_map(x, tape)
        post.append(x)
    pooled = avg_pool_halves(x, tape)
    return EncodeResult(pre, post, pooled)


def decode(model: Model, pooled: Tensor3, skip: Tensor3,
           tape: GradTape | None = None) -> Tensor3:
    """Reconstruct the input field from the pooled boundary representation.

    The pooled rows are replicated back over the spatial axis, concatenated
    with the final pre-pool encoder map, and pushed through transpose
    convolutions (tanh on all but the last) until the input extent returns.
    """
    if model.decoder is None:
        raise ConfigError("model was built without a decoder")
    if pooled.data.shape[0] != 2 or pooled.data.shape[1:] != skip.data.shape[1:]:
        raise ShapeError("pooled/skip maps must come from the same encoder pass")
    x = replicate_rows_halves(pooled, skip.data.shape[0], tape)
    x = concat_channels(x, skip, tape)
    last = len(model.decoder) - 1
    for l, layer in enumerate(model.decoder):
        x = transpose_conv2d(x, layer, tape)
        if l < last:
            x = tanh_map(x, tape)
    return x


def total_loss(model: Model, sample: Sample, tape: GradTape | None = None,
               mse_scale: float = 1.0):
    """Boundary MSE + zero-sum penalty (+ weighted reconstruction MSE).

    Labels drop the first ``depth`` time columns to align with valid-conv
    shrinkage.  Returns (total, components); component values are always
    unscaled.  ``mse_scale`` preconditions the MSE terms for optimization
    (see :func:`train`); the penalty keeps its natural units so it neither
    stiffens nor drowns at small data scales.
    """
    cfg = model.config
    n = cfg.depth
    labels = sample.boundary[:, n:, :]
    if labels.shape[2] != cfg.widths[-1]:
        raise ShapeError(
            f"final width {cfg.widths[-1]} must equal label channels {labels.shape[2]}"
        )
    image = Tensor3(sample.image)
    enc = encode(model, image, tape)
    boundary = mse(enc.pooled, labels, tape)
    penalty = zero_sum_penalty(model.encoder_kernels(), cfg.lambda_zs, tape)
    terms = [boundary, penalty]
    weights = [mse_scale, 1.0]
    components = {"boundary": boundary.value, "zero_sum": penalty.value}
    if cfg.decoder and cfg.rec_weight != 0.0:
        recon = decode(model, enc.pooled, enc.post[-1], tape)
        rec = mse(recon, image.data, tape)
        terms.append(rec)
        weights.append(cfg.rec_weight * mse_scale)
        components["reconstruction"] = rec.value
    total = scalar_sum(terms, weights, tape)
    return total, components


def raw_total(model: Model, components: dict) -> float:
    """Unscaled training loss: boundary + penalty + weighted reconstruction."""
    return (
        components["boundary"]
        + components["zero_sum"]
        + model.config.rec_weight * components.get("reconstruction", 0.0)
    )


def boundary_mse(model: Model, sample: Sample) -> float:
    """Headline metric: boundary MSE alone, no tape."""
    enc = encode(model, Tensor3(sample.image))
    labels = sample.boundary[:, model.config.depth:, :]
    return mse(enc.pooled, labels).value


def evaluate(model: Model, samples) -> float:
    """Mean boundary MSE over a sample collection."""
    vals = [boundary_mse(model, s) for s in samples]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class TrainReport:
    family: str
    steps_per_epoch: int
    epochs_run: int = 0
    stop_reason: str = ""
    wall_time_s: float = 0.0
    train_loss: list = field(default_factory=list)      # mean total loss per epoch
    train_boundary: list = field(default_factory=list)  # mean boundary MSE per epoch
    train_reg: list = field(default_factory=list)       # mean regularizer per epoch
    val_mse: list = field(default_factory=list)         # boundary MSE on validation
    best_val: list = field(default_factory=list)        # running minimum of val_mse

    def final_val(self) -> float:
        return self.best_val[-1] if self.best_val else float("nan")

    def to_csv(self, path) -> None:
        lines = ["epoch,train_loss,train_boundary,train_reg,val_mse,best_val"]
        for i in range(self.epochs_run):
            lines.append(
                f"{i},{self.train_loss[i]:.17g},{self.train_boundary[i]:.17g},"
                f"{self.train_reg[i]:.17g},{self.val_mse[i]:.17g},{self.best_val[i]:.17g}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


def train(
    model: Model,
    dataset: Dataset,
    epochs: int = 150,
    steps_per_epoch: int = 2000,
    stop_threshold: float = 1e-11,
    seed: int = 0,
    grad_scale: float | None = None,
) -> TrainReport:
    """One image per step, seeded shuffle, AdaDelta updates, early stop on
    validation MSE.  Divergence aborts with the report collected so far.

    ``grad_scale`` preconditions the MSE terms of the optimized loss: at
    tiny source amplitudes the boundary-MSE gradients would otherwise sit
    far below AdaDelta's epsilon floor and the kernels could never travel.
    The default normalizes by the training labels' mean square.  Reported
    losses are always unscaled.
    """
    if dataset.family != model.config.family:
        raise ConfigError(
            f"dataset family {dataset.family!r} does not match model {model.config.family!r}"
        )
    params = model.parameters()
    opt = AdaDelta(params)
    rng = np.random.default_rng(seed)
    train_samples = dataset.train_samples()
    val_samples = dataset.val_samples()
    if grad_scale is None:
        n = model.config.depth
        label_sq = float(np.mean([np.mean(s.boundary[:, n:, :] ** 2) for s in train_samples]))
        grad_scale = 1.0 / max(label_sq, 1e-300)
    report = TrainReport(model.config.family, steps_per_epoch)
    order = rng.permutation(len(train_samples))
    pos = 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        sum_total = sum_boundary = sum_reg = 0.0
        for _ in range(steps_per_epoch):
            if pos == len(order):
                order = rng.permutation(len(train_samples))
                pos = 0
            sample = train_samples[order[pos]]
            pos += 1
            tape = GradTape()
            total, comps = total_loss(model, sample, tape, mse_scale=grad_scale)
            if not np.isfinite(total.value):
                report.stop_reason = "diverged"
                report.wall_time_s = time.perf_counter() - t0
                return report
            grads = tape.gradients(total, params)
            opt.step(grads)
            sum_total += raw_total(model, comps)
            sum_boundary += comps["boundary"]
            sum_reg += comps["zero_sum"]
        report.train_loss.append(sum_total / steps_per_epoch)
        report.train_boundary.append(sum_boundary / steps_per_epoch)
        report.train_reg.append(sum_reg / steps_per_epoch)
        val = evaluate(model, val_samples)
        report.val_mse.append(val)
        report.best_val.append(min(val, report.best_val[-1]) if report.best_val else val)
        report.epochs_run = epoch + 1
        if val < stop_threshold:
            report.stop_reason = "threshold"
            break
    if not report.stop_reason:
        report.stop_reason = "epochs"
    report.wall_time_s = time.perf_counter() - t0
    return report


def init_from_stencils(model: Model, width: int = 50, cfl: float = 0.5) -> Model:
    """Set encoder kernels to the scheme's analytic (or best-fit) factors.

    The last layer carries the pooling-window scale (and sign) so the pooled
    output reproduces the raw boundary traces.
    """
    from .stencils import analytic_stencil, best_factorization

    cfg = model.config
    if any(k != 1 for k in cfg.widths) or cfg.in_channels != 1:
        raise ConfigError("stencil init needs single-kernel single-channel layers")
    window = ((width - cfg.depth) + 1) // 2  # rows in the first pooled half
    if cfg.family == "hyperbolic" and cfg.depth == 1:
        stencil = analytic_stencil("hyperbolic", cfl).oracle
        model.encoder[0][0].weights[:, :, 0] = stencil * window
        return model
    if cfg.family == "elliptic" and cfg.depth == 2:
        k1, k2 = analytic_stencil("elliptic").factors
        model.encoder[0][0].weights[:, :, 0] = k1
        model.encoder[1][0].weights[:, :, 0] = k2 * (-window)
        return model
    if cfg.depth == 2 and cfg.family in ("hyperbolic", "parabolic"):
        target = analytic_stencil(cfg.family, cfl).composed
        k1, k2, _ = best_factorization(target)
        balance = np.sqrt(np.linalg.norm(k2) / np.linalg.norm(k1))
        k1, k2 = k1 * balance, k2 / balance
        model.encoder[0][0].weights[:, :, 0] = k1
        model.encoder[1][0].weights[:, :, 0] = k2 * window
        return model
    raise ConfigError(f"no stencil initialization for {cfg.family} at depth {cfg.depth}")


WEIGHTS_HEADER = "stencilseer-weights v1"


def save_weights(model: Model, path) -> None:
    """Text format, full f64 precision; covers the encoder stack."""
    cfg = model.config
    lines = [
        f"{WEIGHTS_HEADER} {cfg.family} depth={cfg.depth} "
        f"widths={','.join(str(k) for k in cfg.widths)} coupling={int(cfg.coupling)}"
    ]
    for l, layer in enumerate(model.encoder):
        for i, kern in enumerate(layer):
            for c in range(kern.cin):
                w = kern.weights[:, :, c].ravel()
                vals = " ".join(f"{v:.17g}" for v in w)
                lines.append(f"layer={l} k={i} ch={c} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_weights(path) -> Model:
    """Rebuild a model from a weights file; reload is bit-exact."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or not lines[0].startswith(WEIGHTS_HEADER):
        raise FormatError("not a weights file")
    fields = lines[0][len(WEIGHTS_HEADER):].split()
    if len(fields) != 4:
        raise FormatError("malformed weights header")
    family = fields[0]
    try:
        depth = int(fields[1].removeprefix("depth="))
        widths = tuple(int(v) for v in fields[2].removeprefix("widths=").split(","))
        coupling = bool(int(fields[3].removeprefix("coupling=")))
    except ValueError as exc:
        raise FormatError(f"malformed weights header: {exc}") from None
    cfg = ModelConfig(family=family, depth=depth, widths=widths, coupling=coupling)
    model = build_model(cfg, seed=0)
    seen = set()
    for line in lines[1:]:
        parts = line.split()
        if len(parts) != 7:
            raise FormatError(f"malformed weights line: {line!r}")
        try:
            l = int(parts[0].removeprefix("layer="))
            i = int(parts[1].removeprefix("k="))
            c = int(parts[2].removeprefix("ch="))
            vals = [float(v) for v in parts[3:]]
        except ValueError as exc:
            raise FormatError(f"malformed weights line: {exc}") from None
        try:
            model.encoder[l][i].weights[:, :, c] = np.array(vals).reshape(2, 2)
        except IndexError:
            raise FormatError(f"weight line outside architecture: {line!r}") from None
        seen.add((l, i, c))
    expected = {
        (l, i, c)
        for l, layer in enumerate(model.encoder)
        for i, kern in enumerate(layer)
        for c in range(kern.cin)
    }
    if seen != expected:
        raise FormatError("weights file does not cover the full kernel stack")
    return model
