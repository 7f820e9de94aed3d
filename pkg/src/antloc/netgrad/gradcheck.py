"""Central finite-difference checks of analytic gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .net import LocalizerNet, localizer_layers


@dataclass
class GradCheckResult:
    name: str
    n_checked: int
    rel_error: float
    max_abs_error: float
    passed: bool
    n_kinks_skipped: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.n_checked} entries, rel err {self.rel_error:.2e}"
                f" ({self.n_kinks_skipped} kink-crossing entries resampled)")


def _central_difference(evaluate, flat, i, step, baseline_masks):
    """Return the central difference, or None when +/-step changes a relu pattern."""
    orig = flat[i]
    flat[i] = orig + step
    with T.record_relu_masks() as plus_masks:
        f_plus = evaluate()
    flat[i] = orig - step
    with T.record_relu_masks() as minus_masks:
        f_minus = evaluate()
    flat[i] = orig
    if plus_masks != baseline_masks or minus_masks != baseline_masks:
        return None
    return (f_plus - f_minus) / (2 * step)


def _sample_and_compare(entries, n_samples, rng, evaluate, lookup, step, baseline_masks):
    """Finite-difference ``n_samples`` entries, skipping those whose stencil crosses a kink."""
    order = rng.permutation(len(entries)) if n_samples is not None else np.arange(len(entries))
    target = len(entries) if n_samples is None else min(n_samples, len(entries))
    analytic, numeric, skipped = [], [], 0
    for j in order:
        if len(analytic) >= target:
            break
        flat, grad_flat, i = lookup(entries[j])
        fd = _central_difference(evaluate, flat, i, step, baseline_masks)
        if fd is None:
            skipped += 1
            continue
        analytic.append(0.0 if grad_flat is None else float(grad_flat[i]))
        numeric.append(fd)
    return np.array(analytic), np.array(numeric), skipped


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over the sampled entries."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_function(fn, inputs: dict, n_samples: int | None = None, step: float = 1e-3,
                   rng=None, tol: float = 1e-4, name: str = "function") -> GradCheckResult:
    """Compare autodiff gradients of scalar ``fn(**tensors)`` to central differences.

    ``inputs`` maps argument names to float64 arrays; ``n_samples`` entries
    are sampled across all inputs (all entries when None).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    tensors = {k: T.Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in inputs.items()}
    with T.record_relu_masks() as baseline:
        out = fn(**tensors)
    out.backward()
    entries = [(k, i) for k, t in tensors.items() for i in range(t.value.size)]

    def lookup(entry):
        k, i = entry
        grad = tensors[k].grad
        return tensors[k].value.reshape(-1), None if grad is None else grad.reshape(-1), i

    with T.no_grad():
        analytic, numeric, skipped = _sample_and_compare(
            entries, n_samples, rng, lambda: float(fn(**tensors).value), lookup, step, baseline)
    err = relative_error(analytic, numeric)
    return GradCheckResult(name, len(analytic), err, float(np.abs(analytic - numeric).max(initial=0.0)),
                           err < tol, skipped)


def check_network_loss(loss_fn, n_samples: int = 200, size: int = 6, step: float = 1e-3, seed: int = 0,
                       tol: float = 1e-4, name: str = "network", width: int = 4, depth: int = 2,
                       batch: int = 2) -> GradCheckResult:
    """Finite-difference check over sampled network parameters.

    ``loss_fn(net_output)`` must return a scalar Tensor; it receives
    the network output on a random ``batch x size^3`` input.
    """
    rng = np.random.default_rng(seed)
    net = LocalizerNet(localizer_layers(width, depth), seed=seed).astype(np.float64)
    for p in net.params.values():
        # non-zero biases so that every layer's bias gradient is exercised
        if p.value.ndim == 1:
            p.value[:] = rng.normal(0, 0.1, p.value.shape)
    x = rng.random((batch, size, size, size, 1))
    net.zero_grad()
    with T.record_relu_masks() as baseline:
        loss = loss_fn(net(x))
    loss.backward()
    entries = [(k, i) for k, t in net.params.items() for i in range(t.value.size)]

    def lookup(entry):
        k, i = entry
        return net.params[k].value.reshape(-1), net.params[k].grad.reshape(-1), i

    with T.no_grad():
        analytic, numeric, skipped = _sample_and_compare(
            entries, n_samples, rng, lambda: float(loss_fn(net(x)).value), lookup, step, baseline)
    err = relative_error(analytic, numeric)
    return GradCheckResult(name, len(analytic), err, float(np.abs(analytic - numeric).max()), err < tol, skipped)


def check_training_pipelines(n_samples: int = 200, size: int = 6, seed: int = 0, step: float = 1e-3,
                             tol: float = 1e-4) -> list[GradCheckResult]:
    """Both training objectives end to end: net -> softmax -> DSNT -> loss, and net -> WMSE."""
    from .. import loss as L
    from ..heatmap import HeatmapConfig, make_coord_grids, render_gaussian_target
    from ..volume import Landmark, voxel_to_normalized

    rng = np.random.default_rng(seed)
    shape = (size,) * 3
    targets = rng.uniform(0, size - 1, size=(2, 3))
    heat = np.stack([render_gaussian_target(Landmark("t", "voxel", t), shape, (1.0, 1.0, 1.0), HeatmapConfig()).data
                     for t in targets])
    grids = make_coord_grids(shape).stacked()
    norm_targets = voxel_to_normalized(targets, shape)
    dists = heat / heat.sum(axis=(1, 2, 3), keepdims=True)
    pipelines = {
        "dsnt pipeline": lambda out: L.dsnt_loss_t(out, norm_targets, dists, grids, 1.0)[0],
        "wmse pipeline": lambda out: L.wmse_loss_t(out, heat),
    }
    return [check_network_loss(fn, n_samples=n_samples, size=size, step=step, seed=seed, tol=tol, name=name)
            for name, fn in pipelines.items()]
