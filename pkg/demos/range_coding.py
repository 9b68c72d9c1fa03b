"""
Range coding a Laplacian source
===============================

Quantized latents look roughly Laplacian around zero. Here we draw such
symbols, build one CDF table for them and compare the coded length with
the ideal code length.

Run with ``python demos/range_coding.py``.
"""

import numpy as np

from rdcodec.coding import range_decode, range_encode, table_from_pmf

rng = np.random.default_rng(0)

# integer symbols, mostly in [-8, 8], with a few outliers that need the escape bin
symbols = np.round(rng.laplace(0.0, 1.5, size=20_000)).astype(int)
symbols[rng.integers(0, len(symbols), 20)] = 40

support = np.arange(-8, 9)
counts = np.array([(symbols == v).sum() for v in support], dtype=float)
escaped = len(symbols) - counts.sum()
pmf = np.append(counts, max(escaped, 1)) / len(symbols)
table = table_from_pmf(pmf, offset=-8)

data = range_encode(symbols.tolist(), [table] * len(symbols))
back = range_decode(data, [table] * len(symbols))
assert back == symbols.tolist()

###############################################################################
# Ideal length: the entropy under the table itself. Escaped values also pay
# for their raw chunk, which is 16 bits here.
freqs = np.diff(table.cdf) / 2**16
in_range = (symbols >= -8) & (symbols <= 8)
ideal = -np.log2(freqs[symbols[in_range] + 8]).sum()
ideal += (~in_range).sum() * (-np.log2(freqs[-1]) + 16)

print(f"symbols        {len(symbols)}")
print(f"coded bytes    {len(data)}")
print(f"ideal bytes    {ideal / 8:.1f}")
print(f"overhead       {100 * (8 * len(data) / ideal - 1):.3f} %")
