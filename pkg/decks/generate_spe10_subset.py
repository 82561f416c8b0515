#!/usr/bin/env python3
"""Generate the heterogeneous 60x220x1 fields used by spe10_subset.deck.

The SPE10 benchmark data is distributed by its maintainers and is not bundled
here; this script builds a stand-in top layer with the same file layout,
permeability span (1e-3 .. 2e4 md, seven orders of magnitude) and a
channel-like correlated texture, deterministically from a fixed seed.

Writes spe10_subset_perm.dat (kx, ky, kz blocks) and spe10_subset_poro.dat
next to this script.  Point [fields] at real SPE10 layer data to run the
original benchmark instead.
"""

import os

import numpy as np

NX, NY = 60, 220
SEED = 2010
K_MIN, K_MAX = 1.0e-3, 2.0e4  # md


def correlated_field(rng, corr_x=3.0, corr_y=9.0):
    """Smooth anisotropic Gaussian field on the NX x NY grid, unit variance."""
    noise = rng.standard_normal((NY, NX))
    spec = np.fft.rfft2(noise)
    fy = np.fft.fftfreq(NY)[:, None]
    fx = np.fft.rfftfreq(NX)[None, :]
    filt = np.exp(-2.0 * (np.pi ** 2) * ((corr_y * fy) ** 2 + (corr_x * fx) ** 2))
    smooth = np.fft.irfft2(spec * filt, s=(NY, NX))
    smooth -= smooth.mean()
    smooth /= smooth.std()
    return smooth


def main():
    rng = np.random.default_rng(SEED)
    f = correlated_field(rng)
    # sharpen the histogram toward a channelized look
    f = np.sign(f) * np.abs(f) ** 1.25
    u = (f - f.min()) / (f.max() - f.min())
    ln_k = np.log(K_MIN) + u * (np.log(K_MAX) - np.log(K_MIN))
    kx = np.exp(ln_k)                      # (NY, NX): row-major j, then i
    ky = kx
    kz = 0.3 * kx
    poro = np.clip(0.05 + 0.42 * u ** 1.4 + 0.01 * rng.standard_normal(u.shape),
                   0.0, 0.5)
    poro[u < 0.015] = 0.0                  # a few inactive-porosity cells

    here = os.path.dirname(os.path.abspath(__file__))

    def dump(path, blocks):
        vals = np.concatenate([b.reshape(-1) for b in blocks])  # i fastest
        with open(path, "w") as fh:
            for i in range(0, len(vals), 6):
                fh.write(" ".join(f"{v:.6e}" for v in vals[i:i + 6]) + "\n")

    dump(os.path.join(here, "spe10_subset_perm.dat"), [kx, ky, kz])
    dump(os.path.join(here, "spe10_subset_poro.dat"), [poro])
    print(f"kx range [{kx.min():.3e}, {kx.max():.3e}] md, "
          f"poro range [{poro.min():.3f}, {poro.max():.3f}], "
          f"zero-poro cells: {(poro == 0).sum()}")


if __name__ == "__main__":
    main()
