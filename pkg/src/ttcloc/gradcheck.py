"""Central finite-difference gradient checking.

Used by the test suite and the ``gradcheck`` CLI subcommand.  The checks
compare hand-derived gradients against an independent numerical estimate;
the binarize gate is reported separately because its surrogate gradient is
intentionally not the true derivative of the step function.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import network
from .network import NetworkParams

FD_STEP = 1e-5
STRICT_TOLERANCE = 1e-5


def flatten_params(params: NetworkParams) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.as_dict().values()])


def unflatten_params(theta: np.ndarray, template: NetworkParams) -> NetworkParams:
    arrays = {}
    i = 0
    for name, arr in template.as_dict().items():
        arrays[name] = theta[i : i + arr.size].reshape(arr.shape).copy()
        i += arr.size
    return NetworkParams(**arrays)


def numerical_gradient(f: Callable[[np.ndarray], float], x0: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        plus = x0.copy()
        minus = x0.copy()
        plus.flat[i] += step
        minus.flat[i] -= step
        grad.flat[i] = (f(plus) - f(minus)) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """L2 relative disagreement; robust when both gradients are tiny."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


@dataclass
class ComponentCheck:
    name: str
    max_rel_err: float
    strict: bool  # surrogate-gradient components are reported, not enforced
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return (not self.strict) or self.max_rel_err <= STRICT_TOLERANCE


def check_network_backward(seed: int = 0, t: int = 3, d: int = 2, h: int = 4, c: int = 2) -> float:
    """FD check of forward/backward on a random linear functional of the outputs."""
    rng = np.random.default_rng(seed)
    params = network.init_params(rng, d, h, c)
    params.conv_bias += rng.normal(scale=0.1, size=h)  # keep relu inputs off exact kinks
    x = rng.normal(size=(t, d))
    d_scores = rng.normal(size=(t, c))
    d_thresholds = rng.normal(size=(t,))

    def objective(theta: np.ndarray) -> float:
        p = unflatten_params(theta, params)
        smap, _ = network.forward(p, x)
        return float(np.sum(d_scores * smap.scores) + np.sum(d_thresholds * smap.thresholds))

    smap, cache = network.forward(params, x)
    analytic = flatten_params(network.backward(cache, d_scores, d_thresholds))
    numeric = numerical_gradient(objective, flatten_params(params))
    return relative_error(analytic, numeric)


def check_network_backward_with_dropout(seed: int = 0, t: int = 4, d: int = 2, h: int = 4, c: int = 2) -> float:
    rng = np.random.default_rng(seed)
    params = network.init_params(rng, d, h, c)
    params.conv_bias += rng.normal(scale=0.1, size=h)
    x = rng.normal(size=(t, d))
    mask = (rng.uniform(size=(t, h)) > 0.5).astype(np.float64)
    d_scores = rng.normal(size=(t, c))
    d_thresholds = rng.normal(size=(t,))

    def objective(theta: np.ndarray) -> float:
        p = unflatten_params(theta, params)
        smap, _ = network.forward(p, x, dropout_mask=mask, drop_rate=0.7)
        return float(np.sum(d_scores * smap.scores) + np.sum(d_thresholds * smap.thresholds))

    _, cache = network.forward(params, x, dropout_mask=mask, drop_rate=0.7)
    analytic = flatten_params(network.backward(cache, d_scores, d_thresholds))
    numeric = numerical_gradient(objective, flatten_params(params))
    return relative_error(analytic, numeric)


def check_gate_gradient(kind: str, seed: int = 0, n: int = 40) -> float:
    """FD check of the gate nonlinearity's input gradient."""
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=2.0, size=n)
    weights = rng.normal(size=n)

    def objective(xv: np.ndarray) -> float:
        return float(np.sum(weights * network.gate_values(xv, kind)))

    values = network.gate_values(x, kind)
    analytic = weights * network.gate_input_grad(x, values, kind)
    numeric = numerical_gradient(objective, x)
    return relative_error(analytic, numeric)


def _fd_instance(seed: int, *, flagged: bool):
    """Tiny deterministic training instance positioned away from kinks."""
    from .data import GroundTruthSegment, VideoSample

    rng = np.random.default_rng(seed)
    d, h, c = 2, 4, 3
    params = network.init_params(rng, d, h, c)
    # nonzero conv bias avoids exact relu kinks from all-dead snippet rows
    params.conv_bias += rng.normal(scale=0.1, size=h)
    clips = [
        VideoSample(
            id="fd-a",
            features=rng.normal(size=(5, d)),
            labels=frozenset({0}),
            snippet_duration=1.0,
            segments=(GroundTruthSegment(0, 1.0, 3.0),) if flagged else None,
            fully_annotated=flagged,
        ),
        VideoSample(
            id="fd-b",
            features=rng.normal(size=(4, d)),
            labels=frozenset({1, 2}),
            snippet_duration=1.0,
            segments=None,
            fully_annotated=False,
        ),
    ]
    return params, clips


def check_total_loss(
    gating: str,
    aggregator: str,
    reg_form: str,
    with_localization: bool,
    seed: int = 0,
) -> float:
    """FD check of the combined objective for one configuration."""
    from .objectives import LossConfig, total_loss

    params, clips = _fd_instance(seed, flagged=with_localization)
    config = LossConfig(
        clas_weight=0.3,
        loc_weight=2.0 if with_localization else 0.0,
        reg_form=reg_form,
        aggregator=aggregator,
    )
    rule = "none" if aggregator == "topk_eighth" and gating == "none" else "predicted"

    def objective(theta: np.ndarray) -> float:
        p = unflatten_params(theta, params)
        breakdown, _ = total_loss(p, clips, config, gating=gating, train_localization=rule)
        return breakdown.total

    _, grads = total_loss(params, clips, config, gating=gating, train_localization=rule)
    numeric = numerical_gradient(objective, flatten_params(params))
    return relative_error(flatten_params(grads), numeric)


def run_gradient_checks(seed: int = 0) -> list[ComponentCheck]:
    """Full sweep: network backward, gates, and every objective configuration.

    Differentiable configurations are strict (enforced at 1e-5); the
    binarize gate's straight-through surrogate is reported but exempt.
    """
    from .objectives import REG_FORMS

    checks = []

    start = time.perf_counter()
    err = max(check_network_backward(seed), check_network_backward(seed + 1))
    checks.append(ComponentCheck("network_backward", err, True, time.perf_counter() - start))

    start = time.perf_counter()
    err = check_network_backward_with_dropout(seed)
    checks.append(ComponentCheck("network_backward_dropout", err, True, time.perf_counter() - start))

    for kind in ("sigmoid", "softsign", "binarize"):
        start = time.perf_counter()
        err = check_gate_gradient(kind, seed)
        checks.append(ComponentCheck(f"gate_{kind}", err, kind != "binarize", time.perf_counter() - start))

    for gating in ("sigmoid", "softsign"):
        for aggregator in ("gated", "topk_eighth"):
            for reg_form in REG_FORMS:
                for with_loc in (False, True):
                    start = time.perf_counter()
                    err = check_total_loss(gating, aggregator, reg_form, with_loc, seed)
                    name = f"loss_{gating}_{aggregator}_{reg_form}_{'loc' if with_loc else 'noloc'}"
                    checks.append(ComponentCheck(name, err, True, time.perf_counter() - start))

    return checks
