#pragma once

// Datasets: samples are columns of X, labels are a 1 x N row of +-1.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dlmlab/errors.hpp"
#include "dlmlab/linalg.hpp"
#include "dlmlab/model.hpp"
#include "dlmlab/rng.hpp"

namespace dlmlab {

enum class Provenance { synthetic, mnist, constructed };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::synthetic: return "synthetic";
    case Provenance::mnist: return "mnist";
    case Provenance::constructed: return "constructed";
  }
  return "unknown";
}

struct Dataset {
  Matrix x;  // d_0 x N
  Matrix y;  // 1 x N, entries +-1
  Provenance provenance = Provenance::synthetic;

  std::size_t samples() const noexcept { return x.cols(); }
  std::size_t input_dim() const noexcept { return x.rows(); }

  void validate() const {
    if (y.rows() != 1 || y.cols() != x.cols()) {
      throw DimensionError("Dataset: X is " + x.shape() + " but y is " + y.shape());
    }
    for (std::size_t n = 0; n < y.cols(); ++n) {
      if (y(0, n) != 1.0 && y(0, n) != -1.0) {
        throw PreconditionError("Dataset: label " + std::to_string(y(0, n)) + " at index " +
                                std::to_string(n) + " is not +-1");
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// X ~ N(0,1) i.i.d., y = +-1 with probability 1/2. Samples are drawn one
/// column at a time, so a larger N extends a smaller one with the same seed.
inline Dataset synthetic_dataset(std::size_t d0, std::size_t n, std::uint64_t seed) {
  if (d0 == 0 || n == 0) throw PreconditionError("synthetic_dataset: d0 and N must be >= 1");
  Rng features(derive_seed(seed, 0));
  Rng labels(derive_seed(seed, 1));
  Matrix x(d0, n);
  Matrix y(1, n);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < d0; ++i) x(i, s) = features.normal();
    y(0, s) = labels.coin() ? 1.0 : -1.0;
  }
  return {std::move(x), std::move(y), Provenance::synthetic};
}

inline Dataset subset(const Dataset& data, std::size_t n_sub, std::uint64_t seed) {
  if (n_sub == 0 || n_sub > data.samples()) {
    throw PreconditionError("subset: requested " + std::to_string(n_sub) + " of " +
                            std::to_string(data.samples()) + " samples");
  }
  Rng rng(seed);
  std::vector<std::size_t> idx(data.samples());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // Partial Fisher-Yates: the first n_sub slots are a uniform sample.
  for (std::size_t i = 0; i < n_sub; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n_sub);
  return {select_columns(data.x, idx), select_columns(data.y, idx), data.provenance};
}

// ---------------------------------------------------------------------------
// IDX (MNIST) files: big-endian header, magic 0x00000803 for u8 images
// (count, rows, cols) and 0x00000801 for u8 labels (count).

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxFormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t at,
                               const std::filesystem::path& path) {
  if (buf.size() < at + 4) {
    throw IdxFormatError(path.string() + ": truncated header (" + std::to_string(buf.size()) +
                         " bytes)");
  }
  return (std::uint32_t{buf[at]} << 24) | (std::uint32_t{buf[at + 1]} << 16) |
         (std::uint32_t{buf[at + 2]} << 8) | std::uint32_t{buf[at + 3]};
}

inline void put_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b.data(), 4);
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream s;
  s << "0x" << std::hex;
  s.width(8);
  s.fill('0');
  s << v;
  return s.str();
}

}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;  // count * rows * cols
};

inline IdxImages read_idx_images(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  const std::uint32_t magic = detail::read_be32(buf, 0, path);
  if (magic != kIdxImagesMagic) {
    throw IdxFormatError(path.string() + ": bad magic number, expected " +
                         detail::hex32(kIdxImagesMagic) + " got " + detail::hex32(magic));
  }
  IdxImages img;
  img.count = detail::read_be32(buf, 4, path);
  img.rows = detail::read_be32(buf, 8, path);
  img.cols = detail::read_be32(buf, 12, path);
  const std::size_t need = img.count * img.rows * img.cols;
  if (buf.size() < 16 + need) {
    throw IdxFormatError(path.string() + ": truncated, header promises " + std::to_string(need) +
                         " pixel bytes but only " + std::to_string(buf.size() - 16) +
                         " are present");
  }
  img.pixels.assign(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return img;
}

inline std::vector<unsigned char> read_idx_labels(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  const std::uint32_t magic = detail::read_be32(buf, 0, path);
  if (magic != kIdxLabelsMagic) {
    throw IdxFormatError(path.string() + ": bad magic number, expected " +
                         detail::hex32(kIdxLabelsMagic) + " got " + detail::hex32(magic));
  }
  const std::size_t count = detail::read_be32(buf, 4, path);
  if (buf.size() < 8 + count) {
    throw IdxFormatError(path.string() + ": truncated, header promises " + std::to_string(count) +
                         " labels but only " + std::to_string(buf.size() - 8) + " are present");
  }
  return {buf.begin() + 8, buf.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

inline void write_idx_images(const std::filesystem::path& path, const IdxImages& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxFormatError("cannot write " + path.string());
  detail::put_be32(out, kIdxImagesMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(img.count));
  detail::put_be32(out, static_cast<std::uint32_t>(img.rows));
  detail::put_be32(out, static_cast<std::uint32_t>(img.cols));
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_idx_labels(const std::filesystem::path& path,
                             const std::vector<unsigned char>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxFormatError("cannot write " + path.string());
  detail::put_be32(out, kIdxLabelsMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

/// Pixels p -> p/255 (one column per image); y = +1 for digits 0-4, -1 for 5-9.
inline Dataset load_mnist(const std::filesystem::path& images_path,
                          const std::filesystem::path& labels_path) {
  const IdxImages img = read_idx_images(images_path);
  const std::vector<unsigned char> labels = read_idx_labels(labels_path);
  if (labels.size() != img.count) {
    throw IdxFormatError("count mismatch: " + images_path.string() + " has " +
                         std::to_string(img.count) + " images, " + labels_path.string() +
                         " has " + std::to_string(labels.size()) + " labels");
  }
  if (img.count == 0 || img.rows * img.cols == 0) {
    throw IdxFormatError(images_path.string() + ": no pixel data");
  }
  const std::size_t d0 = img.rows * img.cols;
  Matrix x(d0, img.count);
  Matrix y(1, img.count);
  for (std::size_t s = 0; s < img.count; ++s) {
    for (std::size_t i = 0; i < d0; ++i) x(i, s) = static_cast<double>(img.pixels[s * d0 + i]) / 255.0;
    if (labels[s] > 9) {
      throw IdxFormatError(labels_path.string() + ": label " + std::to_string(labels[s]) +
                           " at index " + std::to_string(s) + " is not a digit");
    }
    y(0, s) = labels[s] <= 4 ? 1.0 : -1.0;
  }
  return {std::move(x), std::move(y), Provenance::mnist};
}

/// Inverse of load_mnist up to the digit identity: pixels are round(255 x)
/// and labels are written as 0 (+1) or 5 (-1).
inline void save_mnist(const Dataset& data, std::size_t rows, std::size_t cols,
                       const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  if (rows * cols != data.input_dim()) {
    throw DimensionError("save_mnist: " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " images do not match d0 = " + std::to_string(data.input_dim()));
  }
  IdxImages img{data.samples(), rows, cols, std::vector<unsigned char>(data.samples() * rows * cols)};
  std::vector<unsigned char> labels(data.samples());
  for (std::size_t s = 0; s < data.samples(); ++s) {
    for (std::size_t i = 0; i < data.input_dim(); ++i) {
      const double p = std::clamp(data.x(i, s), 0.0, 1.0) * 255.0;
      img.pixels[s * data.input_dim() + i] = static_cast<unsigned char>(std::lround(p));
    }
    labels[s] = data.y(0, s) > 0 ? 0 : 5;
  }
  write_idx_images(images_path, img);
  write_idx_labels(labels_path, labels);
}

// ---------------------------------------------------------------------------
// Explicit full-rank witness for the last hidden layer gradient matrix.

struct Construction {
  MnnConfig config;
  Matrix x;                    // all ones, d_0 x N
  Weights weights;             // W'_l = [1, 0, ..., 0] for l <= L-2; ones above
  std::vector<Matrix> slopes;  // A'_1 .. A'_{L-1}
  NoiseTensors noise;          // a realization that reproduces `slopes` in forward()
};

/// Requires L >= 3 and N <= d_{L-2} d_{L-1}. Lower slopes are all ones,
/// A'_{L-2} = [1_{1 x d_{L-1}} (x) I_{d_{L-2}}]_{1..N},
/// A'_{L-1} = [I_{d_{L-1}} (x) 1_{1 x d_{L-2}}]_{1..N},
/// so that V'_{L-2} = A'_{L-2} and G'_{L-1} = [I]_{1..N}. All constructed
/// pre-activations are >= 0, so eps = A' reproduces the slopes exactly.
inline Construction appendix_construction(const std::vector<std::size_t>& widths, std::size_t n,
                                          double leaky_slope = 0.01) {
  MnnConfig config{widths, leaky_slope, {NoiseMode::supplied, 0.0, 0.0}};
  config.validate();
  const std::size_t depth = config.depth();
  if (depth < 3) {
    throw PreconditionError("appendix_construction: need L >= 3, got L = " + std::to_string(depth));
  }
  const std::size_t d_lo = widths[depth - 2];  // d_{L-2}
  const std::size_t d_hi = widths[depth - 1];  // d_{L-1}
  if (n == 0 || n > d_lo * d_hi) {
    throw PreconditionError("appendix_construction: need 1 <= N <= d_{L-2} d_{L-1} = " +
                            std::to_string(d_lo * d_hi) + ", got " + std::to_string(n));
  }

  std::vector<Matrix> layers;
  for (std::size_t l = 1; l <= depth; ++l) {
    Matrix w(widths[l], widths[l - 1]);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      if (l <= depth - 2) {
        w(i, 0) = 1.0;
      } else {
        for (double& v : w.row(i)) v = 1.0;
      }
    }
    layers.push_back(std::move(w));
  }

  std::vector<Matrix> slopes;
  for (std::size_t l = 1; l + 2 < depth; ++l) slopes.emplace_back(widths[l], n, 1.0);
  Matrix a_lo(d_lo, n);
  Matrix a_hi(d_hi, n);
  for (std::size_t k = 0; k < n; ++k) {
    a_lo(k % d_lo, k) = 1.0;
    a_hi(k / d_lo, k) = 1.0;
  }
  slopes.push_back(a_lo);
  slopes.push_back(a_hi);

  return {config, Matrix(widths[0], n, 1.0), Weights(std::move(layers)), slopes,
          NoiseTensors(slopes)};
}

}  // namespace dlmlab
