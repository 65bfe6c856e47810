"""Where the 2D attention block sits and what its mask looks like.

Run: python3 demos/attention_placements.py
"""
import numpy as np

from attnbof.attention import AttentionBlock, codeword_attention, input_attention, series_weights, temporal_attention
from attnbof.tensor import Tensor

np.set_printoptions(precision=4, suppress=True)
rng = np.random.default_rng(0)

phi = rng.dirichlet(np.ones(4), size=6).T  # 4 codewords x 6 steps
print("memberships\n", phi)

ca, mask = codeword_attention(Tensor(phi), AttentionBlock.create(4, tau=1.0), return_mask=True)
print("codeword mask (one distribution over codewords per step)\n", mask.data)

ta, mask = temporal_attention(Tensor(phi), AttentionBlock.create(6, tau=1.0), return_mask=True)
print("temporal mask (one distribution over steps per codeword)\n", mask.data)

# Input attention on raw features: a large row draws most of the weight.
X = rng.standard_normal((3, 6))
X[0] += 5.0
out, mask = input_attention(Tensor(X), AttentionBlock.create(3, tau=1.0), return_mask=True)
print("mean weight per input series", series_weights(mask.data[None])[0])

# tau = 0 switches the block off entirely.
off = input_attention(Tensor(X), AttentionBlock.create(3, tau=0.0)).data
print("tau = 0 reproduces the input:", np.array_equal(off, X))
