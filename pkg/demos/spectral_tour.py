"""A walk through the frequency stage on a tiny token grid.

Run: python demos/spectral_tour.py
"""
import numpy as np

from mlip import spectral as S
from mlip.tensor import Tensor, backward

rng = np.random.default_rng(0)

# an 8x8 grid of 4-channel tokens
x = rng.standard_normal((8, 8, 4))

# the radix-2 FFT against the literal double sum
spec = S.dft_2d(x)
oracle = S.brute_dft_oracle(x)
print("fft vs double sum, max |diff|:", np.abs(spec.complex() - oracle.complex()).max())

# real input, so the spectrum is conjugate symmetric and half of it is enough
half = S.half_spectrum(spec)
print("full spectrum", spec.shape, "-> half", half.shape, "+ nyquist column", half.nyquist.shape)

back = S.idft_2d_real(half)
print("round trip, max |diff|:", np.abs(back - x).max())

# DC term is the plain sum of each channel
print("DC == channel sums:", np.allclose(spec.real[0, 0], x.sum(axis=(0, 1))))

# Lego-Filter: N learnable pieces blended with fixed cosine weights
print("cosine weights for 4 pieces:", np.round(S.lego_weights(4), 4))
pieces = Tensor(rng.standard_normal((4, 8, 4, 4)) * 0.02, requires_grad=True)
lego = S.LegoFilter(pieces)
mixed = S.fourier_mix(Tensor(x), lego)
print("fourier_mix output", mixed.shape)

# gradients reach the filter pieces
backward(mixed.sum(), [pieces])
print("grad norm on pieces: %.4g" % np.linalg.norm(pieces.grad))

# pointwise product of spectra is circular convolution
k = rng.standard_normal((8, 8, 1))
y = rng.standard_normal((8, 8, 1))
fast = S.ifft2(S.dft_2d(k).complex() * S.dft_2d(y).complex()).real
slow = np.zeros_like(y)
for p in range(8):
    for q in range(8):
        slow[p, q] = sum(k[i, j] * y[(p - i) % 8, (q - j) % 8] for i in range(8) for j in range(8))
print("convolution theorem, max |diff|:", np.abs(fast - slow).max())
