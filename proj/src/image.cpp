#include "illusion/image.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "illusion/errors.hpp"

namespace illusion {

namespace {

int reflect_index(int i, int length) {
  // Half-sample symmetric: ... c b a | a b c ... | c b a ...
  const int period = 2 * length;
  i %= period;
  if (i < 0) i += period;
  return i < length ? i : period - 1 - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    const double w = std::exp(-0.5 * (k * k) / (sigma * sigma));
    kernel[k + radius] = w;
    total += w;
  }
  for (double& w : kernel) w /= total;
  return kernel;
}

// 8×8 orthonormal DCT-II basis, rows = frequency.
const Eigen::Matrix<double, 8, 8>& dct_matrix() {
  static const Eigen::Matrix<double, 8, 8> basis = [] {
    Eigen::Matrix<double, 8, 8> m;
    for (int u = 0; u < 8; ++u) {
      const double scale = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) {
        m(u, x) = scale * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
    }
    return m;
  }();
  return basis;
}

Vec apply_blocks(const Vec& in, GridShape grid, bool inverse) {
  require_grid(in, grid);
  if (grid.height % 8 != 0 || grid.width % 8 != 0) {
    throw ShapeError("block DCT needs grid dimensions divisible by 8, got " +
                     std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  const auto& d = dct_matrix();
  Vec out(in.size());
  Eigen::Matrix<double, 8, 8> block;
  for (int by = 0; by < grid.height; by += 8) {
    for (int bx = 0; bx < grid.width; bx += 8) {
      for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) block(r, c) = in[(by + r) * grid.width + bx + c];
      const Eigen::Matrix<double, 8, 8> t =
          inverse ? Eigen::Matrix<double, 8, 8>(d.transpose() * block * d)
                  : Eigen::Matrix<double, 8, 8>(d * block * d.transpose());
      for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) out[(by + r) * grid.width + bx + c] = t(r, c);
    }
  }
  return out;
}

}  // namespace

void require_grid(const Vec& x, GridShape grid) {
  if (grid.height <= 0 || grid.width <= 0 || x.size() != grid.pixels()) {
    throw ShapeError("pixel vector of length " + std::to_string(x.size()) +
                     " does not match a " + std::to_string(grid.height) + "x" +
                     std::to_string(grid.width) + " grid");
  }
}

Vec gaussian_blur(const Vec& image, GridShape grid, double sigma) {
  require_grid(image, grid);
  if (sigma <= 1e-12) return image;
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);
  const int h = grid.height;
  const int w = grid.width;

  Vec rows(image.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[k + radius] * image[r * w + reflect_index(c + k, w)];
      rows[r * w + c] = acc;
    }
  }
  Vec out(image.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[k + radius] * rows[reflect_index(r + k, h) * w + c];
      out[r * w + c] = acc;
    }
  }
  return out;
}

Vec horizontal_flip(const Vec& image, GridShape grid) {
  require_grid(image, grid);
  Vec out(image.size());
  for (int r = 0; r < grid.height; ++r)
    for (int c = 0; c < grid.width; ++c)
      out[r * grid.width + c] = image[r * grid.width + (grid.width - 1 - c)];
  return out;
}

Vec translate(const Vec& image, GridShape grid, int dx, int dy) {
  require_grid(image, grid);
  Vec out = Vec::Zero(image.size());
  for (int r = 0; r < grid.height; ++r) {
    const int src_r = r - dy;
    if (src_r < 0 || src_r >= grid.height) continue;
    for (int c = 0; c < grid.width; ++c) {
      const int src_c = c - dx;
      if (src_c < 0 || src_c >= grid.width) continue;
      out[r * grid.width + c] = image[src_r * grid.width + src_c];
    }
  }
  return out;
}

Vec block_dct8(const Vec& image, GridShape grid) { return apply_blocks(image, grid, false); }

Vec block_idct8(const Vec& coefficients, GridShape grid) {
  return apply_blocks(coefficients, grid, true);
}

}  // namespace illusion
