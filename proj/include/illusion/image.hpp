#pragma once

#include "illusion/linalg.hpp"

namespace illusion {

/// Row-major H×W view of a flattened pixel vector.
struct GridShape {
  int height = 0;
  int width = 0;

  int pixels() const { return height * width; }
};

void require_grid(const Vec& x, GridShape grid);

/// Separable Gaussian blur, kernel truncated at 3σ, half-sample symmetric
/// ("reflect") padding. σ ≤ 1e-12 is the identity.
Vec gaussian_blur(const Vec& image, GridShape grid, double sigma);

Vec horizontal_flip(const Vec& image, GridShape grid);

/// Integer shift with zero fill; positive dx moves content right, positive dy down.
Vec translate(const Vec& image, GridShape grid, int dx, int dy);

/// Orthonormal 8×8 DCT-II, applied in place to every block of the grid.
/// Both grid dimensions must be multiples of 8.
Vec block_dct8(const Vec& image, GridShape grid);
Vec block_idct8(const Vec& coefficients, GridShape grid);

}  // namespace illusion
