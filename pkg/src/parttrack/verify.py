"""Gradient verification: randomized primitive checks and an end-to-end
finite-difference check of the total training loss on a toy model.

The end-to-end check runs the smooth attention configuration (soft
samples). The straight-through hard path deliberately backpropagates the
soft sample's gradient rather than the true (zero) local gradient of the
one-hot forward, so finite differences cannot certify it; its backward
is instead pinned equal to the soft backward by unit test.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import RngState, Tensor, grad_check
from .geometry import TargetMask, estimate_bbox
from .losses import attention_loss, bbox_loss, total_loss
from .training import TrainConfig

PRIMITIVE_TOL = 1e-5
TOTAL_TOL = 1e-4


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def _scalarize(t):
    # deterministic non-degenerate functional; keeps f fixed across FD calls
    w = np.cos(0.7 * np.arange(t.size, dtype=np.float64)).reshape(t.shape) + 0.1
    return ad.sum_(ad.mul(t, ad.constant(w)))


def _primitive_cases():
    """name -> trial builder; builders pre-draw all constants so the checked
    function is fixed across finite-difference evaluations."""

    def matmul_case(rng):
        w = ad.constant(rng.normal(size=(4, 3)))
        return lambda x: _scalarize(ad.matmul(x, w)), Tensor(rng.normal(size=(2, 4)))

    def add_case(rng):
        b = ad.constant(rng.normal(size=(3,)))
        return lambda x: _scalarize(ad.add(x, b)), Tensor(rng.normal(size=(2, 3)))

    def multiply_case(rng):
        b = ad.constant(rng.normal(size=(2, 3)))
        return lambda x: _scalarize(ad.mul(x, b)), Tensor(rng.normal(size=(2, 3)))

    def relu_case(rng):
        return (lambda x: _scalarize(ad.relu(x)),
                Tensor(_away_from_zero(rng, (3, 3))))

    def sigmoid_case(rng):
        return lambda x: _scalarize(ad.sigmoid(x)), Tensor(rng.normal(size=(2, 4)))

    def layer_norm_case(rng):
        return lambda x: _scalarize(ad.layer_norm(x)), Tensor(rng.normal(size=(3, 6)))

    def concat_case(rng):
        b = ad.constant(rng.normal(size=(2, 3)))
        return lambda x: _scalarize(ad.concat([x, b])), Tensor(rng.normal(size=(2, 3)))

    def slice_case(rng):
        return lambda x: _scalarize(x[1:3, 0:2]), Tensor(rng.normal(size=(4, 3)))

    def reshape_case(rng):
        return (lambda x: _scalarize(ad.reshape(x, (6,))),
                Tensor(rng.normal(size=(2, 3))))

    def mean_case(rng):
        return lambda x: _scalarize(ad.mean(x, axis=1)), Tensor(rng.normal(size=(3, 4)))

    def sqrt_case(rng):
        return (lambda x: _scalarize(ad.sqrt(x)),
                Tensor(rng.uniform(0.1, 4.0, size=(3, 3))))

    def l1_case(rng):
        b = ad.constant(rng.normal(size=(2, 3)) + 5.0)
        return lambda x: ad.l1_distance(x, b), Tensor(_away_from_zero(rng, (2, 3)))

    def softmax_case(rng):
        return (lambda x: _scalarize(ad.softmax(x, axis=-1)),
                Tensor(rng.normal(size=(3, 4))))

    def attention_case(rng):
        k = ad.constant(rng.normal(size=(5, 4)))
        v = ad.constant(rng.normal(size=(5, 4)))
        return lambda x: _scalarize(ad.attention(x, k, v)), Tensor(rng.normal(size=(3, 4)))

    def conv2d_case(rng):
        w = ad.constant(rng.normal(size=(3, 3, 2, 3)))
        return (lambda x: _scalarize(ad.conv2d(x, w, stride=2, padding=1)),
                Tensor(rng.normal(size=(6, 6, 2))))

    return {
        "matmul": matmul_case, "add": add_case, "multiply": multiply_case,
        "relu": relu_case, "sigmoid": sigmoid_case, "layer_norm": layer_norm_case,
        "concat": concat_case, "slice": slice_case, "reshape": reshape_case,
        "mean": mean_case, "sqrt": sqrt_case, "l1_distance": l1_case,
        "softmax": softmax_case, "attention": attention_case, "conv2d": conv2d_case,
    }


def primitive_grad_suite(trials: int = 100, seed: int = 0,
                         eps: float = 1e-5) -> dict[str, float]:
    """Max finite-difference error per primitive over randomized trials.

    Inputs are kept away from relu/abs kinks, which are measure-zero and
    have no defined two-sided derivative.
    """
    results: dict[str, float] = {}
    for idx, (name, case) in enumerate(_primitive_cases().items()):
        worst = 0.0
        for t in range(trials):
            rng = np.random.default_rng([seed, idx, t])
            f, x = case(rng)
            worst = max(worst, grad_check(f, x, eps=eps))
        results[name] = worst
    return results


def toy_config() -> TrainConfig:
    """Smallest full pipeline: 2x2 template grid, 4x4 search grid."""
    return TrainConfig(channels=8, heads=2, encoder_layers=1, ff_mult=2,
                       template_size=32, search_size=64, stride=16,
                       epochs=4, warmup_epochs=1, steps_per_epoch=2,
                       batch_size=2)


def toy_inputs(seed: int = 0):
    rng = RngState(seed)
    cfg = toy_config()
    template = rng.uniform(-0.5, 0.5, size=(cfg.template_size, cfg.template_size, 3))
    pseudo = rng.uniform(-0.5, 0.5, size=(cfg.template_size, cfg.template_size, 3))
    search = rng.uniform(-0.5, 0.5, size=(cfg.search_size, cfg.search_size, 3))
    mask = TargetMask(np.array([1.0, 1.0, 0.0, 1.0]))
    gt = np.array([0.45, 0.55, 0.4, 0.3])
    return cfg, template, pseudo, search, mask, gt


def toy_total_loss(params, cfg: TrainConfig, template, pseudo, search, mask, gt,
                   noise_seed: int = 77):
    """Total loss with the smooth (soft-sample) attention path."""
    mc = cfg.model()
    f_z = mdl.extract_features(template, params, mc, "template")
    h_x, h_z, locations = mdl.forward_parts(params, mc, f_z, mask, pseudo, search)
    logits = ad.matmul(h_z, ad.transpose(h_x))
    a = ad.gumbel_softmax(logits, tau=cfg.tau, hard=False, rng=RngState(noise_seed))
    pred = estimate_bbox(locations, mask, cfg.sigma)
    l1, g_loss = bbox_loss(pred, Tensor(gt))
    atten = attention_loss(a, mdl.search_part_coords(mc), locations, mask)
    tot, _ = total_loss(l1, g_loss, atten, atten_lambda=cfg.atten_lambda)
    return tot


def toy_total_loss_check(seed: int = 0, eps: float = 1e-6,
                         param_filter=None) -> dict[str, float]:
    """Finite-difference check of the full loss w.r.t. every parameter."""
    cfg, template, pseudo, search, mask, gt = toy_inputs(seed)
    params = mdl.init_params(cfg.model(), RngState(seed))
    errors: dict[str, float] = {}
    for name in params:
        if param_filter is not None and not param_filter(name):
            continue

        def f(x, name=name):
            trial = dict(params)
            trial[name] = x
            return toy_total_loss(trial, cfg, template, pseudo, search, mask, gt)

        errors[name] = grad_check(f, params[name], eps=eps)
    return errors


def run_gradcheck(trials: int = 100, toy: bool = False, seed: int = 0):
    """(report lines, all_passed) for the CLI and service."""
    lines = []
    ok = True
    prim = primitive_grad_suite(trials=trials, seed=seed)
    for name, err in prim.items():
        passed = err < PRIMITIVE_TOL
        ok &= passed
        lines.append(f"primitive {name}: max rel err {err:.3e} "
                     f"[{'PASS' if passed else 'FAIL'} @ {PRIMITIVE_TOL}]")
    if toy:
        errs = toy_total_loss_check(seed=seed)
        worst = max(errs.values())
        passed = worst < TOTAL_TOL
        ok &= passed
        lines.append(f"total_loss (toy model, {len(errs)} tensors): "
                     f"max rel err {worst:.3e} "
                     f"[{'PASS' if passed else 'FAIL'} @ {TOTAL_TOL}]")
    return lines, ok
