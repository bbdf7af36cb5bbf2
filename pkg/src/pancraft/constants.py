"""Frozen numeric constants for the degradation pipeline and metric suite.

Golden files and regression tests pin these; bump CONSTANTS_VERSION when any
value changes so stale reports are detectable.
"""

CONSTANTS_VERSION = 1

# PAN:MS resolution ratio used throughout
RESOLUTION_RATIO = 4

# Gaussian stand-in for the sensor MTF low-pass (PAN-relative pixels)
MTF_SIGMA = 1.7

# training patch extents
PATCH_PAN = 64
PATCH_MS = 16

# SSIM: Gaussian window and stabilizers (unit dynamic range)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# universal-quality-index block size (shared by Q2^n, D_lambda, D_s)
Q_BLOCK = 32

# identical images report this instead of an infinite PSNR
PSNR_CAP_DB = 99.0

# high-pass filter for the spatial correlation coefficient
SCC_KERNEL = ((0, -1, 0), (-1, 4, -1), (0, -1, 0))

# guard for PSNR-style divisions
EPS = 1e-12

# largest PAN-MS misalignment the generator injects by default (PAN px)
MAX_SHIFT = 2.0
