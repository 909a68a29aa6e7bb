"""Random small instances for every differentiable tensor op."""

import numpy as np

from cdm_forge import tensor as T
from cdm_forge.gradcheck import numerical_grad, relative_error
from cdm_forge.tensor import Tensor


def _shape(rng, nd=2):
    return tuple(int(s) for s in rng.integers(1, 4, size=nd))


def _case_add(rng):
    s = _shape(rng)
    return [rng.normal(size=s), rng.normal(size=s)], lambda a, b: T.add(a, b)


def _case_add_scalar(rng):
    return [rng.normal(size=_shape(rng)), rng.normal(size=())], lambda a, b: T.add(a, b)


def _case_sub(rng):
    s = _shape(rng)
    return [rng.normal(size=s), rng.normal(size=s)], lambda a, b: T.sub(a, b)


def _case_mul(rng):
    s = _shape(rng)
    return [rng.normal(size=s), rng.normal(size=s)], lambda a, b: T.mul(a, b)


def _case_mul_scalar(rng):
    return [rng.normal(size=_shape(rng)), rng.normal(size=())], lambda a, b: T.mul(b, a)


def _case_scale(rng):
    k = float(rng.normal())
    return [rng.normal(size=_shape(rng))], lambda a: T.scale(a, k)


def _case_matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 4, size=3))
    return [rng.normal(size=(n, k)), rng.normal(size=(k, m))], lambda a, b: T.matmul(a, b)


def _case_affine(rng):
    n, k, m = (int(v) for v in rng.integers(1, 4, size=3))
    return [rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=m)], lambda x, w, b: T.affine(x, w, b)


def _case_silu(rng):
    return [rng.normal(size=_shape(rng)) * 2], T.silu


def _case_tanh(rng):
    return [rng.normal(size=_shape(rng))], T.tanh


def _case_exp(rng):
    return [rng.normal(size=_shape(rng))], T.exp


def _case_log(rng):
    return [rng.uniform(0.5, 2.0, size=_shape(rng))], T.log


def _case_square(rng):
    return [rng.normal(size=_shape(rng))], T.square


def _case_sum(rng):
    return [rng.normal(size=_shape(rng))], lambda a: T.tsum(a)


def _case_sum_axis(rng):
    axis = int(rng.integers(0, 2))
    return [rng.normal(size=_shape(rng))], lambda a: T.tsum(a, axis)


def _case_mean(rng):
    axis = [None, 0, 1][int(rng.integers(0, 3))]
    return [rng.normal(size=_shape(rng))], lambda a: T.mean(a, axis)


def _case_concat(rng):
    n = int(rng.integers(1, 4))
    return [rng.normal(size=(n, 2)), rng.normal(size=(n, 3))], lambda a, b: T.concat([a, b], axis=1)


def _case_slice(rng):
    return [rng.normal(size=(3, 4))], lambda a: a[1:, 1:3]


def _case_reshape(rng):
    return [rng.normal(size=(2, 3))], lambda a: T.reshape(a, (3, 2))


def _case_log_softmax(rng):
    return [rng.normal(size=_shape(rng))], lambda a: T.log_softmax(a)


def _case_gather_rows(rng):
    idx = rng.integers(0, 3, size=5)
    return [rng.normal(size=(3, 2))], lambda a: T.gather_rows(a, idx)


OP_CASES = {
    name[len("_case_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("_case_")
}


def check_case(make, seed: int, h: float = 1e-5) -> float:
    """Relative error between tape gradients and central differences."""
    rng = np.random.default_rng(seed)
    arrays, fn = make(rng)
    probe = rng.normal(size=np.shape(fn(*[T.constant(a) for a in arrays]).data))

    def scalar_loss(ts):
        return T.tsum(T.mul(fn(*ts), probe))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(scalar_loss(leaves))
    analytic = [leaf.grad.copy() for leaf in leaves]

    def value():
        with T.no_grad():
            return scalar_loss([T.constant(a) for a in arrays]).item()

    numeric = numerical_grad(value, arrays, h=h)
    return relative_error(analytic, numeric)
