"""
The context encoder block
=========================

Attention rows and codeword assignments are both probability vectors, and an
untrained block starts as a channel-wise rescaling of its input.
"""

import numpy as np

from nlcen import autograd as ag
from nlcen import nlce as nl
from nlcen.autograd import Tensor

rng = np.random.default_rng(1)
block = nl.NLCE(rng, channels=8, codewords=4)
x = Tensor(rng.normal(size=(2, 8, 5, 5)))

attn = nl.pairwise_attention(x, block).data
print("attention", attn.shape, "max |row sum - 1|", np.abs(attn.sum(-1) - 1).max())

z = nl.enhance(x, nl.non_local_response(x, block), block)
zp = ag.matmul(nl._positions(z), ag.transpose(block.proj, (1, 0)))
assign = nl.assignment_weights(zp, block).data
print("assignments", assign.shape, "max |row sum - 1|", np.abs(assign.sum(-1) - 1).max())

###############################################################################
# With the output projection still at zero, the enhanced map equals the input
# and the block only gates channels.

block.eval()
out = nl.nlce_forward(x, block).data
gate = out / x.data
print("per-channel gate, image 0:", np.round(gate[0, :, 0, 0], 3))
print("gate constant over positions:", np.allclose(gate, gate[:, :, :1, :1]))
