"""The numpy autodiff core: build a graph, backpropagate, check against finite differences."""

import numpy as np

from lsrec import tensor as tc
from lsrec.model import ModelConfig, forward, init_params
from lsrec.tensor import Tensor

rng = np.random.default_rng(0)

# a two-layer perceptron with a softmax cross-entropy head
w1 = Tensor(rng.standard_normal((5, 8)) * 0.5, requires_grad=True)
w2 = Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True)
x = Tensor(rng.standard_normal((4, 5)))
y = np.array([0, 2, 1, 2])

loss = tc.cross_entropy(tc.matmul(tc.silu(tc.matmul(x, w1)), w2), y)
tc.backward(loss)
print("loss", float(loss.data))
print("grad norm of w1", float(np.linalg.norm(w1.grad)))

with tc.shadow64():
    errs = tc.gradcheck(
        lambda a, b: tc.cross_entropy(tc.matmul(tc.silu(tc.matmul(x, a)), b), y),
        [w1.data.astype(np.float64), w2.data.astype(np.float64)],
    )
print("relative errors vs central differences:", [f"{e:.2e}" for e in errs])

# the same check through a whole toy decoder
cfg = ModelConfig(hidden_dims=8, intermediate_dims=16, context_length=8, attn_heads=2, kv_heads=1,
                  layers=1, vocab_size=16, attn_dropout=0.0)
params = init_params(cfg, 0, std=0.3)
tokens = np.array([1, 4, 9, 2, 7, 3])
names = list(params)


def model_loss(*leaves):
    p = dict(zip(names, leaves))
    logits = forward(tokens[:-1], p, cfg)
    return tc.cross_entropy(logits, tokens[1:])


with tc.shadow64():
    errs = tc.gradcheck(model_loss, [params[n].data.astype(np.float64) for n in names])
print("toy decoder worst relative error:", f"{max(errs):.2e}")
