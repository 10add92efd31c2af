"""Tour of the tensor/autograd core.

Builds a small conv + pool + relu computation, backpropagates a scalar, and
cross-checks one gradient against central finite differences.
"""

import numpy as np

from rrcdet import autograd as ag
from rrcdet.autograd import ParamStore, Tensor, sgd_momentum_step

rng = np.random.default_rng(0)

# forward: conv -> relu -> maxpool -> sum
x = Tensor(rng.standard_normal((1, 2, 8, 8)))
store = ParamStore()
kernel = store.register("demo.kernel", rng.standard_normal((4, 2, 3, 3)) * 0.3)
bias = store.register("demo.bias", np.zeros(4))

y = ag.maxpool2d(ag.relu(ag.conv2d(x, kernel, bias, stride=1, pad=1)), 2, 2)
loss = ag.sum_all(y)
print(f"conv output {y.shape}, loss {loss.item():.4f}")

loss.backward()
print(f"kernel gradient norm {np.linalg.norm(kernel.grad):.4f}")

# finite-difference spot check on one kernel element
index = (1, 0, 2, 2)
step = 1e-5
saved = kernel.data[index]
vals = []
for delta in (step, -step):
    kernel.data[index] = saved + delta
    probe = ag.sum_all(ag.maxpool2d(
        ag.relu(ag.conv2d(x, kernel, bias, stride=1, pad=1)), 2, 2))
    vals.append(probe.item())
kernel.data[index] = saved
numeric = (vals[0] - vals[1]) / (2 * step)
print(f"analytic {kernel.grad[index]:+.8f} vs finite-diff {numeric:+.8f}")

# one SGD step with momentum
before = kernel.data.copy()
sgd_momentum_step(store, lr=0.1, momentum=0.9, weight_decay=0.0)
print(f"sgd step moved kernel by {np.abs(kernel.data - before).max():.5f}, "
      f"gradients cleared: {np.all(kernel.grad == 0)}")
