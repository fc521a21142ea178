"""Interpretability toolkit: analytic stencils, kernel composition algebra,
similarity scoring, residual reports, and a brute-force factorization search.

Stencils are small 2-D arrays in (space, time) orientation, matching the
image axes.  All derivative stencils are zero-sum, so they annihilate
constant fields.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .autodiff import Tensor3
from .errors import ConfigError, ShapeError, UsageError
from .pde import Sample


@dataclass(frozen=True)
class StencilSet:
    """Ground truth for one family: the scheme's annihilator plus, where a
    depth-2 factorization exists, its 2x2 factor pair and their 3x3 product."""

    family: str
    oracle: np.ndarray                      # exact annihilator of the scheme
    factors: tuple[np.ndarray, np.ndarray] | None
    composed: np.ndarray | None             # 3x3 depth-2 composition target


def analytic_stencil(family: str, cfl: float = 0.5) -> StencilSet:
    """The generator scheme's exact annihilating stencil for ``family``."""
    if family == "hyperbolic":
        oracle = np.array([[-cfl, 0.0], [cfl - 1.0, 1.0]])
        delay = np.array([[0.0, 1.0], [0.0, 0.0]])  # one time step, not zero-sum
        return StencilSet(family, oracle, (oracle, delay), compose_pair(oracle, delay))
    if family == "elliptic":
        k1 = np.array([[0.0, -1.0], [0.0, 1.0]])
        k2 = np.array([[0.0, 1.0], [0.0, -1.0]])
        return StencilSet(family, np.array([[-1.0], [2.0], [-1.0]]), (k1, k2),
                          compose_pair(k1, k2))
    if family == "parabolic":
        oracle = np.array([[-cfl, 0.0], [2.0 * cfl - 1.0, 1.0], [-cfl, 0.0]])
        composed = np.zeros((3, 3))
        composed[:, 1:] = oracle  # delayed one step so a 2x2 pair can approach it
        return StencilSet(family, oracle, None, composed)
    raise ConfigError(f"no analytic stencil for family {family!r}")


def compose_pair(k1: np.ndarray, k2: np.ndarray) -> np.ndarray:
    """Polynomial product of two same-orientation kernels.

    Applying valid cross-correlation with k1 then k2 equals one valid
    cross-correlation with this product.
    """
    return convolve2d(np.asarray(k1, float), np.asarray(k2, float), mode="full")


def compose_stack(stack, path=None) -> np.ndarray:
    """Collapse a stack of kernel layers into one equivalent stencil.

    ``stack`` is a sequence of layers; each layer is either a 2-D array or a
    list of :class:`~stencilseer.autodiff.Kernel2x2`.  Multi-kernel or
    multi-channel layers need a declared ``path``: one ``(kernel_index,
    channel_index)`` per layer.
    """
    planes = []
    for li, layer in enumerate(stack):
        if isinstance(layer, np.ndarray):
            planes.append(np.asarray(layer, float))
            continue
        kernels = list(layer)
        if path is None:
            if len(kernels) != 1 or kernels[0].cin != 1:
                raise UsageError(
                    "multi-kernel/multi-channel stacks need a declared path"
                )
            planes.append(kernels[0].weights[:, :, 0])
        else:
            ki, ci = path[li]
            planes.append(kernels[ki].weights[:, :, ci])
    out = planes[0]
    for p in planes[1:]:
        out = compose_pair(out, p)
    return out


def _pad_to(arr: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    out[: arr.shape[0], : arr.shape[1]] = arr
    return out


def kernel_similarity(learned, truth) -> float:
    """|cosine| of the flattened stencils, in [0, 1].

    Invariant under nonzero rescaling of either argument; exactly 1 iff
    proportional.  The smaller stencil is zero-padded top-left aligned.
    """
    a = np.asarray(learned, float)
    b = np.asarray(truth, float)
    shape = (max(a.shape[0], b.shape[0]), max(a.shape[1], b.shape[1]))
    a = _pad_to(a, shape).ravel()
    b = _pad_to(b, shape).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("similarity undefined for an all-zero stencil")
    return float(abs(np.dot(a, b)) / (na * nb))


def best_similarity(learned, truth) -> float:
    """Similarity up to transpose: image axis orientation is a convention."""
    s = kernel_similarity(learned, truth)
    t = kernel_similarity(learned, np.asarray(truth, float).T)
    return max(s, t)


def residual_oracle(stencil, sample: Sample, channel: int = 0) -> float:
    """Network-free ground truth: max-abs of the stencil's interior residual.

    Pure linear cross-correlation over one image channel; rows within
    (stencil extent + 1) of either spatial boundary are excluded so that
    legitimate source signatures are not counted.
    """
    st = np.asarray(stencil, float)
    image = sample.image[:, :, channel]
    if st.shape[0] > image.shape[0] or st.shape[1] > image.shape[1]:
        raise ShapeError("stencil larger than the image")
    res = correlate2d(image, st, mode="valid")
    margin = st.shape[0] + 1
    interior = res[margin:-margin] if res.shape[0] > 2 * margin else res[0:0]
    return float(np.max(np.abs(interior))) if interior.size else 0.0


@dataclass
class LayerStats:
    interior_max_abs: float
    interior_mean_abs: float
    boundary_max_abs: float


@dataclass
class ActivationReport:
    """Interior residual statistics per encoder layer plus the final map's
    per-spatial-row profile.  Interior excludes the two rows adjacent to
    each spatial boundary."""

    per_layer: list[LayerStats]
    profile: np.ndarray  # per-row mean |activation| of the final pre-pool map

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "stat", "value"])
            for i, st in enumerate(self.per_layer):
                w.writerow([i, "interior_max_abs", f"{st.interior_max_abs:.17g}"])
                w.writerow([i, "interior_mean_abs", f"{st.interior_mean_abs:.17g}"])
                w.writerow([i, "boundary_max_abs", f"{st.boundary_max_abs:.17g}"])
            last = len(self.per_layer) - 1
            for r, v in enumerate(self.profile):
                w.writerow([last, f"row_mean_abs_{r}", f"{v:.17g}"])


def activation_report(model, sample: Sample) -> ActivationReport:
    """Run the encoder and summarise how close each feature map is to zero."""
    from .model import encode  # local import to avoid a cycle

    enc = encode(model, Tensor3(sample.image))
    stats = []
    for post in enc.post:
        arr = np.abs(post.data)
        interior = arr[2:-2] if arr.shape[0] > 4 else arr[0:0]
        edge = np.concatenate([arr[:2], arr[-2:]]) if arr.shape[0] > 4 else arr
        stats.append(
            LayerStats(
                interior_max_abs=float(interior.max()) if interior.size else 0.0,
                interior_mean_abs=float(interior.mean()) if interior.size else 0.0,
                boundary_max_abs=float(edge.max()),
            )
        )
    profile = np.abs(enc.post[-1].data).mean(axis=(1, 2))
    return ActivationReport(stats, profile)


def _conv_matrix(k: np.ndarray, out_shape) -> np.ndarray:
    """Matrix of vec(k2) -> vec(compose_pair(k, k2)) for 2x2 k2."""
    rows = out_shape[0] * out_shape[1]
    mat = np.zeros((rows, 4))
    for idx, (i, j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        basis = np.zeros((2, 2))
        basis[i, j] = 1.0
        mat[:, idx] = _pad_to(compose_pair(k, basis), out_shape).ravel()
    return mat


def best_factorization(target, n_starts: int = 64, seed: int = 0):
    """Search for 2x2 kernels whose composition best matches ``target``.

    Multi-start search over the bilinear objective
    ||compose(k1, k2) - target||^2: a short alternating-least-squares warm-up
    (which alone crawls in the bilinear swamp) followed by a damped
    Gauss-Newton polish with the analytic Jacobian.  Returns
    (k1, k2, residual); a residual of zero certifies factorability.
    """
    from scipy.optimize import least_squares

    t = np.asarray(target, float)
    if t.shape[0] > 3 or t.shape[1] > 3:
        raise ShapeError("target must be at most 3x3")
    shape = (3, 3)
    tvec = _pad_to(t, shape).ravel()

    def residuals(x):
        k1 = x[:4].reshape(2, 2)
        k2 = x[4:].reshape(2, 2)
        return _pad_to(compose_pair(k1, k2), shape).ravel() - tvec

    def jacobian(x):
        k1 = x[:4].reshape(2, 2)
        k2 = x[4:].reshape(2, 2)
        return np.hstack((_conv_matrix(k2, shape), _conv_matrix(k1, shape)))

    rng = np.random.default_rng(seed)
    best = (None, None, np.inf)
    for _ in range(n_starts):
        k1 = rng.normal(size=(2, 2))
        for _ in range(10):
            k2 = np.linalg.lstsq(_conv_matrix(k1, shape), tvec, rcond=None)[0].reshape(2, 2)
            k1 = np.linalg.lstsq(_conv_matrix(k2, shape), tvec, rcond=None)[0].reshape(2, 2)
        sol = least_squares(residuals, np.concatenate([k1.ravel(), k2.ravel()]),
                            jac=jacobian, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        res = float(np.linalg.norm(residuals(sol.x)))
        if res < best[2]:
            best = (sol.x[:4].reshape(2, 2).copy(), sol.x[4:].reshape(2, 2).copy(), res)
    return best


def save_stencil(stencil, path) -> None:
    """Text dump: extent line, then row-major full-precision decimals."""
    arr = np.asarray(stencil, float)
    lines = [f"{arr.shape[0]} {arr.shape[1]}"]
    for row in arr:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_stencil(path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    rows, cols = (int(v) for v in lines[0].split())
    arr = np.array([[float(v) for v in line.split()] for line in lines[1 : rows + 1]])
    if arr.shape != (rows, cols):
        raise ShapeError(f"stencil dump claims {(rows, cols)}, found {arr.shape}")
    return arr
