"""Finite-difference gradient suites at three scopes: ops, blocks, model.

Every check runs in float64. Affine ops (linear in each argument) must
match to 1e-6; everything else to 1e-4. Central differences are exact for
affine ops at any step, so those use a large step that keeps round-off far
below tolerance. Modules use a 1e-4 step: some parameters (a layer-norm
scale feeding a depthwise conv and batch norm) have near-zero gradients,
where a smaller step only measures round-off.
"""

from __future__ import annotations

from typing import Callable, List

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import GradCheckReport, grad_check, module_grad_check
from .autodiff.tensor import mean, reshape, total
from .backbone import ClassifierHead, LowToHighAlign, ModelConfig, SimpleStem, StemStream, build_model
from .blocks import (
    CliffordCrossBlock,
    CliffordSelfBlock,
    EnergyBaseGFFN,
    GatedResidualFusion,
    RollingConfig,
    SparseRollingProduct,
    rolling_features,
    rolling_features_composed,
    set_layer_scales,
    shift_set,
)
from .training.loss import weighted_bce

AFFINE_TOL = 1e-6
NONLINEAR_TOL = 1e-4
AFFINE_STEP = 1e-2
NONLINEAR_STEP = 1e-5
MODULE_STEP = 1e-4
SCOPES = ("ops", "blocks", "model")

TINY_MODEL = ModelConfig(input_size=32, dim=8, num_self_blocks=2, high_grid=8, low_grid=4, drop_path_max=0.2,
                         head_dropout=0.1)


def _fixed(seed: int) -> Callable[[], np.random.Generator]:
    return lambda: np.random.default_rng(seed)


def op_cases(seed: int = 0):
    """``(name, fn, inputs, tol)`` for every differentiable op."""
    r = np.random.default_rng(seed)
    n = r.standard_normal
    D = 8
    sh = shift_set(D)
    rm, rv = np.zeros(3), np.ones(3)
    y_soft = r.uniform(0.05, 0.95, (3, 4))
    w_pos = r.uniform(0.5, 3.0, 4)
    A, N = AFFINE_TOL, NONLINEAR_TOL
    return [
        ("add_broadcast", lambda a, b: a + b, [n((2, 3, 4)), n((3, 1))], A),
        ("sub", lambda a, b: a - b, [n((2, 3)), n((2, 3))], A),
        ("mul_broadcast", lambda a, b: a * b, [n((2, 3, 4)), n((1, 3, 1))], A),
        ("neg", lambda a: -a, [n((4,))], A),
        ("reshape", lambda a: reshape(a, (6, 2)), [n((3, 4))], A),
        ("sum", lambda a: total(a), [n((3, 4))], A),
        ("mean", lambda a: mean(a), [n((3, 4))], A),
        ("sigmoid", ops.sigmoid, [n((3, 5)) * 3], N),
        ("silu", ops.silu, [n((3, 5)) * 3], N),
        ("conv2d_dense_s2_p1", lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1),
         [n((2, 3, 7, 7)), n((4, 3, 3, 3)), n(4)], A),
        ("conv2d_7x7_s4_p3", lambda x, w: ops.conv2d(x, w, None, stride=4, pad=3),
         [n((1, 3, 12, 12)), n((2, 3, 7, 7))], A),
        ("conv2d_1x1", lambda x, w, b: ops.conv2d(x, w, b), [n((2, 5, 3, 3)), n((4, 5, 1, 1)), n(4)], A),
        ("conv2d_depthwise", lambda x, w: ops.conv2d(x, w, None, pad=1, groups=4),
         [n((2, 4, 5, 5)), n((4, 1, 3, 3))], A),
        ("conv2d_groups2", lambda x, w, b: ops.conv2d(x, w, b, pad=1, groups=2),
         [n((2, 4, 4, 4)), n((6, 2, 3, 3)), n(6)], A),
        ("batch_norm_train", lambda x, g, b: ops.batch_norm(x, g, b, rm.copy(), rv.copy(), True),
         [n((3, 3, 2, 2)), n(3), n(3)], N),
        ("batch_norm_eval", lambda x, g, b: ops.batch_norm(x, g, b, np.array([0.1, -0.2, 0.3]),
                                                           np.array([0.5, 1.5, 2.0]), False),
         [n((2, 3, 2, 2)), n(3), n(3)], A),
        ("layer_norm_4d", ops.layer_norm_channels, [n((2, 5, 2, 3)), n(5), n(5)], N),
        ("layer_norm_2d", ops.layer_norm_channels, [n((3, 6)), n(6), n(6)], N),
        ("channel_roll", lambda x: ops.channel_roll(x, 3), [n((2, 8, 2, 2))], A),
        ("concat", lambda a, b: ops.concat([a, b], axis=1), [n((2, 2, 3, 3)), n((2, 3, 3, 3))], A),
        ("bilinear_resize_up", lambda x: ops.bilinear_resize(x, 7, 6), [n((2, 2, 3, 4))], A),
        ("avg_pool", lambda x: ops.avg_pool(x, 2), [n((2, 2, 4, 6))], A),
        ("adaptive_avg_pool", lambda x: ops.adaptive_avg_pool(x, 3, 2), [n((2, 2, 7, 5))], A),
        ("global_avg_pool", ops.global_avg_pool, [n((2, 3, 4, 4))], A),
        ("broadcast_spatial", lambda x: ops.broadcast_spatial(x, 3, 2), [n((2, 3, 1, 1))], A),
        ("flatten", ops.flatten, [n((2, 3, 1, 1))], A),
        ("scale_channels", ops.scale_channels, [n((2, 3, 2, 2)), n(3)], A),
        ("drop_path", lambda x: ops.drop_path(x, 0.4, _fixed(3)(), True), [n((6, 2, 2, 2))], A),
        ("dropout", lambda x: ops.dropout(x, 0.3, _fixed(4)(), True), [n((4, 5))], A),
        ("linear", ops.linear, [n((3, 5)), n((4, 5)), n(4)], A),
        ("rolling_features", lambda u, v: rolling_features(u, v, sh), [n((2, D, 2, 2)), n((2, D, 2, 2))], N),
        ("rolling_features_composed", lambda u, v: rolling_features_composed(u, v, sh),
         [n((2, D, 2, 2)), n((2, D, 2, 2))], N),
        ("weighted_bce", lambda z: weighted_bce(z, y_soft, w_pos), [n((3, 4)) * 2], N),
    ]


def run_ops(seed: int = 0) -> List[GradCheckReport]:
    return [grad_check(fn, inputs, h=AFFINE_STEP if tol == AFFINE_TOL else NONLINEAR_STEP, tol=tol, name=name,
                       seed=seed) for name, fn, inputs, tol in op_cases(seed)]


def _scaled(module, value=0.5):
    """Blocks start with tiny layer scales; enlarge them so every path matters."""
    set_layer_scales(module, value)
    return module


def _pair_product(x_h, x_l):
    # couples both stem outputs into one tensor so a single probe covers both
    return x_h * total(x_l)


def block_cases(seed: int = 0):
    """``(name, module, forward, inputs)`` for every block."""
    r = np.random.default_rng(seed)
    n = r.standard_normal
    D, B, H = 8, 2, 4
    m = lambda: np.random.default_rng(seed + 1)  # noqa: E731
    cfg = TINY_MODEL
    return [
        ("SparseRollingProduct", SparseRollingProduct(m(), RollingConfig.from_dim(D)),
         lambda mod, u, v: mod(u, v), [n((B, D, H, H)), n((B, D, H, H))]),
        ("GatedResidualFusion", _scaled(GatedResidualFusion(m(), D, drop_path=0.3)).train(),
         lambda mod, a, b, c: mod(a, b, c, _fixed(5)()), [n((4, D, H, H)), n((4, D, H, H)), n((4, D, H, H))]),
        ("CliffordCrossBlock", _scaled(CliffordCrossBlock(m(), D)).train(),
         lambda mod, a, b: mod(a, b), [n((B, D, H, H)), n((B, D, H, H))]),
        ("CliffordSelfBlock", _scaled(CliffordSelfBlock(m(), D, drop_path=0.2)).train(),
         lambda mod, z: mod(z, _fixed(6)()), [n((4, D, H, H))]),
        ("EnergyBaseGFFN", _scaled(EnergyBaseGFFN(m(), D)).train(),
         lambda mod, f, x: mod(f, x), [n((B, D, H, H)), n((B, D, 2, 2))]),
        ("StemStream", StemStream(m(), 6, D, np.float64).train(),
         lambda mod, f: mod(f), [n((B, 6, H, H))]),
        ("SimpleStem", SimpleStem(m(), cfg, np.float64).train(),
         lambda mod, img: _pair_product(*mod(img)), [n((B, 3, 32, 32))]),
        ("LowToHighAlign", LowToHighAlign(m(), D, 8, np.float64).train(),
         lambda mod, x: mod(x), [n((B, D, H, H))]),
        ("ClassifierHead", ClassifierHead(m(), D, 5, 0.3, np.float64).train(),
         lambda mod, f: mod(f, _fixed(7)()), [n((B, D, H, H))]),
    ]


def run_blocks(seed: int = 0, max_coords: int = 12) -> List[GradCheckReport]:
    return [module_grad_check(fwd, mod, inputs, h=MODULE_STEP, tol=NONLINEAR_TOL, name=name, seed=seed,
                              max_coords=max_coords)
            for name, mod, fwd, inputs in block_cases(seed)]


def tiny_model(seed: int = 0, layer_scale: float = 0.5):
    model = build_model(TINY_MODEL, seed, np.float64)
    set_layer_scales(model, layer_scale)
    return model.train()


def run_model(seed: int = 0, max_coords: int = 6) -> List[GradCheckReport]:
    """The whole tiny network (D=8, S=32, N=2) in training mode."""
    model = tiny_model(seed)
    x = np.random.default_rng(seed + 10).standard_normal((2, 3, 32, 32))
    fwd = lambda mod, img: mod(img, _fixed(8)())  # noqa: E731
    return [module_grad_check(fwd, model, [x], h=MODULE_STEP, tol=NONLINEAR_TOL, name="CliffordM(tiny)", seed=seed,
                              max_coords=max_coords)]


def run_scope(scope: str, seed: int = 0) -> List[GradCheckReport]:
    if scope not in SCOPES:
        raise ValueError(f"gradcheck scope must be one of {SCOPES}, got {scope!r}")
    return {"ops": run_ops, "blocks": run_blocks, "model": run_model}[scope](seed)
