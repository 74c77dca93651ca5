"""Finite-difference checks for every differentiable operation.

Each case builds a fresh evaluation point from a seeded generator. Inputs to
non-smooth operations (abs, clamp, rectifiers) are kept a margin away from
their kinks so a +/- epsilon step never crosses one.
"""
import collections
import logging

import numpy as np

from typing import Callable, Iterable, List, Optional, Sequence, Tuple  # noqa F401

from mapgan.autodiff import ops
from mapgan.autodiff.gradcheck import DEFAULT_EPSILON, gradcheck
from mapgan.autodiff.tensor import DTYPE, Tensor
from mapgan.networks import gan
from mapgan.networks.nn import InitScheme

logger = logging.getLogger(__name__)

POINTWISE_TOLERANCE = 1e-3
DEFAULT_TOLERANCE = 1e-2
DEFAULT_SEEDS = 10

# margin kept between inputs and the kink of a piecewise-linear op
KINK_MARGIN = 0.1

# entries whose gradient is tiny next to the largest one drown in float32 rounding
RELATIVE_FLOOR = 0.05


def _leaf(values):
    return Tensor(np.asarray(values, dtype=DTYPE), requires_grad=True)


def _normal(rng, *shape):
    return _leaf(rng.standard_normal(shape))


def _away_from_zero(rng, *shape):
    u = rng.standard_normal(shape)
    return _leaf(np.sign(u) * (np.abs(u) + KINK_MARGIN))


def _uniform(rng, low, high, *shape):
    return _leaf(rng.uniform(low, high, size=shape))


class GradcheckCase(object):
    """A named point builder plus the tolerance its worst error must meet."""

    def __init__(self, name, build, tolerance, sample=None, floor=0.0):
        # type: (str, Callable, float, Optional[int], float) -> None
        self.name = name
        self.build = build
        self.tolerance = tolerance
        self.sample = sample
        self.floor = floor

    def run(self, seed, epsilon=DEFAULT_EPSILON):
        # type: (int, float) -> float
        op, point = self.build(np.random.default_rng(seed))
        return gradcheck(
            op, point, epsilon=epsilon, seed=seed, sample=self.sample, floor=self.floor
        )


def _binary(fn):
    def build(rng):
        return fn, [_normal(rng, 2, 3, 4), _normal(rng, 2, 3, 4)]

    return build


def _unary(fn, make_point):
    def build(rng):
        return fn, [make_point(rng)]

    return build


def _clamp_point(rng):
    inside = rng.uniform(-0.4, 0.4, size=12)
    outside = np.sign(rng.standard_normal(12)) * rng.uniform(0.6, 2.0, size=12)
    return _leaf(rng.permutation(np.concatenate([inside, outside])).reshape(2, 3, 4))


def _build_dropout(rng):
    mask_seed = int(rng.integers(1 << 31))

    def op(x):
        return ops.dropout(x, 0.5, ops.Mode.TRAIN, np.random.default_rng(mask_seed))

    return op, [_normal(rng, 2, 3, 4, 4)]


def _build_concat(rng):
    return ops.concat_channels, [_normal(rng, 2, 2, 3, 3), _normal(rng, 2, 3, 3, 3)]


def _build_slice(rng):
    return (lambda x: ops.slice_channels(x, 1, 3)), [_normal(rng, 2, 4, 3, 3)]


def _build_conv2d(rng):
    stride = int(rng.choice([1, 2]))
    padding = int(rng.choice([0, 1]))
    point = [_normal(rng, 2, 3, 6, 6), _normal(rng, 4, 3, 3, 3), _normal(rng, 4)]

    def op(x, kernel, bias):
        return ops.conv2d(x, kernel, bias, stride=stride, padding=padding)

    return op, point


def _build_conv_transpose2d(rng):
    stride = int(rng.choice([1, 2]))
    padding = int(rng.choice([0, 1]))
    point = [_normal(rng, 2, 3, 3, 3), _normal(rng, 3, 4, 4, 4), _normal(rng, 4)]

    def op(x, kernel, bias):
        return ops.conv_transpose2d(x, kernel, bias, stride=stride, padding=padding)

    return op, point


def _build_batch_norm(mode):
    def build(rng):
        stats = ops.RunningStats(3)
        stats.mean[...] = rng.standard_normal(3)
        stats.var[...] = rng.uniform(0.5, 2.0, size=3)
        point = [
            _normal(rng, 2, 3, 4, 4),
            _uniform(rng, 0.5, 1.5, 3),
            _normal(rng, 3),
        ]

        def op(x, gamma, beta):
            return ops.batch_norm(x, gamma, beta, stats, mode=mode)

        return op, point

    return build


def _build_discriminator_loss(rng):
    return (
        gan.discriminator_loss,
        [_uniform(rng, 0.1, 0.9, 2, 1, 3, 3), _uniform(rng, 0.1, 0.9, 2, 1, 3, 3)],
    )


def _build_generator_loss(variant):
    def build(rng):
        return (lambda s: gan.generator_loss(s, variant)), [
            _uniform(rng, 0.1, 0.9, 2, 1, 3, 3)
        ]

    return build


def _build_l1_loss(rng):
    generated = rng.standard_normal((2, 3, 4, 4))
    gap = rng.standard_normal((2, 3, 4, 4))
    target = generated + np.sign(gap) * (np.abs(gap) + KINK_MARGIN)
    return gan.l1_loss, [_leaf(generated), _leaf(target)]


# small enough for 16x16 inputs
UNET_TOY_CHANNELS = (4, 8, 8, 8)
UNET_TOY_SIZE = 16
UNET_SAMPLE = 20
UNET_FLOOR = 0.1


def _build_unet(rng):
    scheme = InitScheme(std=0.1, seed=int(rng.integers(1 << 31)))
    g = gan.Generator(UNET_TOY_CHANNELS, dropout_blocks=1, scheme=scheme)
    satellite = Tensor(rng.uniform(-1.0, 1.0, size=(2, 3, UNET_TOY_SIZE, UNET_TOY_SIZE)))
    mask_seed = int(rng.integers(1 << 31))
    params = [param for _, param in g.named_parameters()]

    def op(*_params):
        return g(satellite, ops.Mode.TRAIN, np.random.default_rng(mask_seed))

    return op, params


def _cases():
    pointwise = [
        ("add", _binary(lambda x, y: x + y)),
        ("sub", _binary(lambda x, y: x - y)),
        ("mul", _binary(lambda x, y: x * y)),
        ("neg", _unary(lambda x: -x, lambda rng: _normal(rng, 2, 3, 4))),
        ("log", _unary(lambda x: x.log(), lambda rng: _uniform(rng, 0.5, 2.0, 2, 3, 4))),
        ("abs", _unary(lambda x: x.abs(), lambda rng: _away_from_zero(rng, 2, 3, 4))),
        ("clamp", _unary(lambda x: x.clamp(-0.5, 0.5), _clamp_point)),
        (
            "leaky_relu",
            _unary(lambda x: ops.leaky_relu(x, 0.2), lambda rng: _away_from_zero(rng, 2, 3, 4)),
        ),
        ("tanh", _unary(ops.tanh, lambda rng: _uniform(rng, -2.0, 2.0, 2, 3, 4))),
        ("sigmoid", _unary(ops.sigmoid, lambda rng: _uniform(rng, -3.0, 3.0, 2, 3, 4))),
        ("dropout", _build_dropout),
        ("concat_channels", _build_concat),
        ("slice_channels", _build_slice),
    ]
    others = [
        ("sum", _unary(lambda x: x.sum(), lambda rng: _normal(rng, 3, 4))),
        ("mean", _unary(lambda x: x.mean(), lambda rng: _normal(rng, 3, 4))),
        ("conv2d", _build_conv2d),
        ("conv_transpose2d", _build_conv_transpose2d),
        ("batch_norm_train", _build_batch_norm(ops.Mode.TRAIN)),
        ("batch_norm_eval", _build_batch_norm(ops.Mode.EVAL)),
        ("discriminator_loss", _build_discriminator_loss),
        ("generator_loss_saturating", _build_generator_loss(gan.GanLossVariant.SATURATING)),
        (
            "generator_loss_non_saturating",
            _build_generator_loss(gan.GanLossVariant.NON_SATURATING),
        ),
        ("l1_loss", _build_l1_loss),
    ]

    cases = collections.OrderedDict()
    for name, build in pointwise:
        cases[name] = GradcheckCase(name, build, POINTWISE_TOLERANCE)
    for name, build in others:
        cases[name] = GradcheckCase(name, build, DEFAULT_TOLERANCE, floor=RELATIVE_FLOOR)
    cases["unet"] = GradcheckCase(
        "unet", _build_unet, DEFAULT_TOLERANCE, sample=UNET_SAMPLE, floor=UNET_FLOOR
    )
    return cases


CASES = _cases()


class CaseReport(object):
    def __init__(self, name, worst, tolerance):
        # type: (str, float, float) -> None
        self.name = name
        self.worst = worst
        self.tolerance = tolerance

    @property
    def passed(self):
        # type: () -> bool
        return self.worst < self.tolerance

    def __repr__(self):
        return "CaseReport({!r}, worst={:.3g}, tolerance={:g})".format(
            self.name, self.worst, self.tolerance
        )


def run_suite(names=None, seeds=DEFAULT_SEEDS, epsilon=DEFAULT_EPSILON):
    # type: (Optional[Iterable[str]], int, float) -> List[CaseReport]
    """Worst relative error per case over seeds 0..seeds-1.

    :raises KeyError: a requested case name is unknown
    """
    selected = list(CASES) if not names else list(names)
    unknown = [name for name in selected if name not in CASES]
    if unknown:
        raise KeyError("unknown gradcheck ops {}; known: {}".format(unknown, list(CASES)))

    reports = []
    for name in selected:
        case = CASES[name]
        worst = max(case.run(seed, epsilon) for seed in range(seeds))
        logger.debug("gradcheck %s: worst relative error %g", name, worst)
        reports.append(CaseReport(name, worst, case.tolerance))
    return reports


def format_report(reports):
    # type: (Sequence[CaseReport]) -> str
    width = max(len(r.name) for r in reports)
    lines = [
        "{:<{w}}  {:>10}  {:>9}  {}".format("op", "worst", "tolerance", "result", w=width)
    ]
    for r in reports:
        lines.append(
            "{:<{w}}  {:>10.3e}  {:>9.0e}  {}".format(
                r.name, r.worst, r.tolerance, "PASS" if r.passed else "FAIL", w=width
            )
        )
    return "\n".join(lines)
