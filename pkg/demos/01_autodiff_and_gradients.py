"""A tour of the autodiff core: tensors, the tape, and gradient checking.

Everything in the codec trains through this little reverse-mode engine, so
this script walks the moving parts: recording a computation on a tape,
pulling gradients back, and verifying them against central finite
differences.
"""

import numpy as np

import qrcodec.tensor as T
from qrcodec.tensor import Tape, Tensor, grad_check

rng = np.random.default_rng(7)

# Tensors are thin wrappers over float64 numpy arrays. Outside a tape they
# are plain values: operations compute eagerly and remember nothing.
x = Tensor(rng.normal(size=(2, 3)))
y = T.square(x)
print("eager square, no graph:", y.shape)

# A Tape records every primitive applied while it is active. backward()
# replays the record in reverse and accumulates into .grad on any tensor
# flagged as a parameter.
w = T.parameter(rng.normal(size=(3, 4)), "w")
b = T.parameter(np.zeros(4), "b")

with Tape() as tape:
    h = T.add(T.matmul(x, w), b)
    loss = T.mean(T.square(T.leaky_relu(h)))
tape.backward(loss)
print("loss:", round(loss.item(), 6))
print("dL/dw shape:", w.grad.shape, " dL/db:", np.round(b.grad, 4))

# The same mechanics drive convolutions. Here is a strided, padded conv2d
# of the exact geometry the encoder uses (kernel 5, stride 2, padding 2),
# checked against central differences: grad_check perturbs every entry of
# every input and compares the numeric slope to the tape's gradient.
img = Tensor(rng.normal(size=(1, 3, 8, 8)))
kern = Tensor(rng.normal(size=(4, 3, 5, 5)) * 0.1)
bias = Tensor(np.zeros(4))

err = grad_check(lambda i, k, bb: T.summation(T.conv2d(i, k, bb, stride=2, padding=2)),
                 [img, kern, bias])
print(f"conv2d max relative gradient error: {err:.2e}")
assert err < 1e-6

# Quantization cannot be differentiated, and the library refuses to pretend
# otherwise: rounding under an active tape raises, and training relaxes it
# with additive uniform noise instead (identity gradient, U(-0.5, 0.5)).
v = T.parameter(np.array([0.2, -1.7, 2.5]), "v")
with Tape() as tape2:
    try:
        T.round_half_away(v)
    except T.GraphError as exc:
        print("round under tape ->", exc)
    noisy = T.uniform_noise(v, np.random.default_rng(0))
    out = T.summation(noisy)
tape2.backward(out)
print("noise surrogate passes gradient through:", v.grad)

# Outside training, rounding is fine; ties go away from zero.
print("round_half_away([0.5, -0.5, 2.5]):",
      T.round_half_away(Tensor(np.array([0.5, -0.5, 2.5]))).data)
