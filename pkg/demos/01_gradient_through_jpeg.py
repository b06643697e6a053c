"""
Gradients through a JPEG round trip
===================================

Rounding the quantized DCT coefficients has zero derivative almost
everywhere, so a plain codec hands back no gradient at all. The
straight-through codec keeps the exact forward output and passes the
cotangent through the rounding unchanged.
"""

import numpy as np

from jpegrad.diffjpeg import CodecConfig, HardJPEG, diffjpeg_forward, diffjpeg_vjp, hard_jpeg
from jpegrad.metrics import grad_coverage
from jpegrad.surrogate import init_surrogate, loss_and_input_grad
from jpegrad.tensorgrad import UnsupportedOperation

rng = np.random.default_rng(0)
x = rng.random((32, 32, 3)).astype(np.float32)

# same numbers forward, bit for bit
y, ctx = diffjpeg_forward(x, CodecConfig(qf=50))
print("identical to the reference codec:", np.array_equal(y, hard_jpeg(x, 50)))
print("mean |change| at qf=50: %.2f / 255" % (255 * np.abs(y - x).mean()))

# the reference codec refuses to differentiate
try:
    HardJPEG(50).vjp(None, y)
except UnsupportedOperation as exc:
    print("hard codec:", exc)

# a loss gradient at the decoded image, pulled back to the input
params = init_surrogate(0)
for qf in (50, 75, 90):
    y, ctx = diffjpeg_forward(x, CodecConfig(qf=qf))
    _, gy = loss_and_input_grad(params, y, n=8, rng=np.random.default_rng(1))
    gx = diffjpeg_vjp(ctx, gy)
    print(f"qf={qf}: |grad| = {np.linalg.norm(gx):.3e}, "
          f"coverage diff {grad_coverage('diff', x, qf):.0%} / hard {grad_coverage('hard', x, qf):.0%}")

# in 4:4:4 without output clamping the backward pass is exactly the identity
g = rng.standard_normal(x.shape).astype(np.float32)
print("max |vjp(g) - g|:", float(np.abs(diffjpeg_vjp(ctx, g) - g).max()))
