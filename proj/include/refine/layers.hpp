#pragma once

// Hand-differentiated building blocks. Forward passes are const and write an
// optional tape; backward passes accumulate into Param::grad only when the
// parameter has a gradient buffer (frozen parameters never allocate one).

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "refine/tensor.hpp"

namespace refine {

template <typename T>
struct Param {
  Mat<T> value;
  Mat<T> grad;

  bool trainable() const { return grad.size() != 0; }
  void enable_grad() { grad = Mat<T>::Zero(value.rows(), value.cols()); }
  void disable_grad() { grad.resize(0, 0); }
  void zero_grad() {
    if (trainable()) grad.setZero();
  }
};

template <typename T>
void fill_normal(Mat<T>& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
Mat<T> silu(const Mat<T>& a) {
  return (a.array() / (T(1) + (-a.array()).exp())).matrix();
}

template <typename T>
Mat<T> silu_backward(const Mat<T>& a, const Mat<T>& dz) {
  const auto s = (T(1) / (T(1) + (-a.array()).exp())).eval();
  return (dz.array() * s * (T(1) + a.array() * (T(1) - s))).matrix();
}

template <typename T>
struct Linear {
  Param<T> weight;
  Param<T> bias;

  Linear() = default;
  Linear(int in, int out) {
    weight.value = Mat<T>::Zero(out, in);
    bias.value = Mat<T>::Zero(out, 1);
  }

  int in() const { return static_cast<int>(weight.value.cols()); }
  int out() const { return static_cast<int>(weight.value.rows()); }

  void init_normal(std::mt19937_64& rng, double gain = 1.0) {
    fill_normal(weight.value, rng, gain / std::sqrt(static_cast<double>(in())));
    bias.value.setZero();
  }

  Mat<T> forward(const Mat<T>& x) const {
    require(x.rows() == in(), ErrorKind::ShapeMismatch, "Linear: input rows");
    Mat<T> y(out(), x.cols());
    y.noalias() = weight.value * x;
    y.colwise() += bias.value.col(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, bool want_dx = true) {
    if (weight.trainable()) weight.grad.noalias() += dy * x.transpose();
    if (bias.trainable()) bias.grad += dy.rowwise().sum();
    if (!want_dx) return {};
    Mat<T> dx(in(), dy.cols());
    dx.noalias() = weight.value.transpose() * dy;
    return dx;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f, const std::string& prefix) {
    f(prefix + ".weight", self.weight);
    f(prefix + ".bias", self.bias);
  }
};

/// Per-channel 3x3 convolution over a square token grid, zero padded.
template <typename T>
struct DepthwiseConv {
  Param<T> kernel;  // channels x 9, tap = (dy+1)*3 + (dx+1)
  Param<T> bias;
  int grid = 0;

  DepthwiseConv() = default;
  DepthwiseConv(int channels, int grid_side) : grid(grid_side) {
    kernel.value = Mat<T>::Zero(channels, 9);
    bias.value = Mat<T>::Zero(channels, 1);
  }

  void init_normal(std::mt19937_64& rng) {
    fill_normal(kernel.value, rng, 1.0 / 3.0);
    bias.value.setZero();
  }

  // Calls f(tap, dst_col, src_col, len) for every contiguous run of output
  // tokens that reads a shifted run of input tokens.
  template <typename F>
  void for_each_run(Eigen::Index samples, F&& f) const {
    const int tokens = grid * grid;
    for (Eigen::Index s = 0; s < samples; ++s) {
      const Eigen::Index base = s * tokens;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int tap = (dy + 1) * 3 + dx + 1;
          const int x_lo = std::max(0, -dx);
          const int len = grid - std::abs(dx);
          for (int yy = std::max(0, -dy); yy < grid - std::max(0, dy); ++yy) {
            f(tap, base + yy * grid + x_lo, base + (yy + dy) * grid + x_lo + dx, len);
          }
        }
      }
    }
  }

  Mat<T> forward(const Mat<T>& x) const {
    const Eigen::Index n = x.cols() / (grid * grid);
    Mat<T> y(x.rows(), x.cols());
    y.colwise() = bias.value.col(0);
    for_each_run(n, [&](int tap, Eigen::Index dst, Eigen::Index src, int len) {
      y.middleCols(dst, len).array() += x.middleCols(src, len).array().colwise() * kernel.value.col(tap).array();
    });
    return y;
  }

  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, bool want_dx = true) {
    const Eigen::Index n = x.cols() / (grid * grid);
    Mat<T> dx;
    if (want_dx) dx = Mat<T>::Zero(x.rows(), x.cols());
    const bool train_k = kernel.trainable();
    if (bias.trainable()) bias.grad += dy.rowwise().sum();
    for_each_run(n, [&](int tap, Eigen::Index dst, Eigen::Index src, int len) {
      if (want_dx)
        dx.middleCols(src, len).array() += dy.middleCols(dst, len).array().colwise() * kernel.value.col(tap).array();
      if (train_k)
        kernel.grad.col(tap) += x.middleCols(src, len).cwiseProduct(dy.middleCols(dst, len)).rowwise().sum();
    });
    return dx;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f, const std::string& prefix) {
    f(prefix + ".kernel", self.kernel);
    f(prefix + ".bias", self.bias);
  }
};

/// h -> h + W * silu(dwconv(h) * (1 + G * cond) + U * cond), modulation broadcast per sample.
template <typename T>
struct ResidualBlock {
  DepthwiseConv<T> spatial;
  Linear<T> scale;
  Linear<T> shift;
  Linear<T> mix;

  struct Tape {
    Mat<T> input;
    Mat<T> conv;
    Mat<T> pre;
    Mat<T> act;
  };

  ResidualBlock() = default;
  ResidualBlock(int width, int cond_dim, int grid)
      : spatial(width, grid), scale(cond_dim, width), shift(cond_dim, width), mix(width, width) {}

  /// The scale projection stays zero, so a fresh block is unmodulated.
  void init_normal(std::mt19937_64& rng) {
    spatial.init_normal(rng);
    shift.init_normal(rng);
    mix.init_normal(rng, 0.5);
  }

  int tokens() const { return spatial.grid * spatial.grid; }

  Mat<T> forward(Mat<T> h, const Mat<T>& cond, Tape* tape) const {
    Mat<T> conv = spatial.forward(h);
    const Mat<T> g = scale.forward(cond);
    const Mat<T> s = shift.forward(cond);
    const int tok = tokens();
    Mat<T> pre(conv.rows(), conv.cols());
    for (Eigen::Index n = 0; n < s.cols(); ++n) {
      pre.middleCols(n * tok, tok) = conv.middleCols(n * tok, tok).array().colwise() * (g.col(n).array() + T(1));
      pre.middleCols(n * tok, tok).colwise() += s.col(n);
    }
    Mat<T> act = silu(pre);
    Mat<T> out = mix.forward(act);
    out += h;
    if (tape) {
      tape->input = std::move(h);
      tape->conv = std::move(conv);
      tape->pre = std::move(pre);
      tape->act = std::move(act);
    }
    return out;
  }

  /// Returns d(input); accumulates d(cond) into dcond when dcond is non-null.
  Mat<T> backward(const Tape& tape, const Mat<T>& cond, const Mat<T>& dout, Mat<T>* dcond) {
    const Mat<T> dact = mix.backward(tape.act, dout);
    const Mat<T> dpre = silu_backward(tape.pre, dact);
    const int tok = tokens();
    const Mat<T> g = scale.forward(cond);
    Mat<T> dconv(dpre.rows(), dpre.cols());
    for (Eigen::Index n = 0; n < cond.cols(); ++n)
      dconv.middleCols(n * tok, tok) = dpre.middleCols(n * tok, tok).array().colwise() * (g.col(n).array() + T(1));
    if (dcond || shift.weight.trainable()) {
      Mat<T> ds(dpre.rows(), cond.cols());
      for (Eigen::Index n = 0; n < cond.cols(); ++n) ds.col(n) = dpre.middleCols(n * tok, tok).rowwise().sum();
      Mat<T> dc = shift.backward(cond, ds, dcond != nullptr);
      if (dcond) *dcond += dc;
    }
    if (dcond || scale.weight.trainable()) {
      Mat<T> dg(dpre.rows(), cond.cols());
      for (Eigen::Index n = 0; n < cond.cols(); ++n)
        dg.col(n) = dpre.middleCols(n * tok, tok).cwiseProduct(tape.conv.middleCols(n * tok, tok)).rowwise().sum();
      Mat<T> dc = scale.backward(cond, dg, dcond != nullptr);
      if (dcond) *dcond += dc;
    }
    Mat<T> dh = dout;
    dh += spatial.backward(tape.input, dconv);
    return dh;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f, const std::string& prefix) {
    decltype(self.spatial)::visit(self.spatial, f, prefix + ".spatial");
    decltype(self.scale)::visit(self.scale, f, prefix + ".scale");
    decltype(self.shift)::visit(self.shift, f, prefix + ".shift");
    decltype(self.mix)::visit(self.mix, f, prefix + ".mix");
  }
};

/// Learned per-token offset added to every sample's hidden state.
template <typename T>
struct PositionEmbedding {
  Param<T> table;  // width x tokens

  PositionEmbedding() = default;
  PositionEmbedding(int width, int tokens) { table.value = Mat<T>::Zero(width, tokens); }

  void init_normal(std::mt19937_64& rng, double stddev = 0.1) { fill_normal(table.value, rng, stddev); }

  void forward_inplace(Mat<T>& h) const {
    const Eigen::Index tok = table.value.cols();
    require(h.rows() == table.value.rows() && h.cols() % tok == 0, ErrorKind::ShapeMismatch,
            "PositionEmbedding: hidden state shape");
    for (Eigen::Index n = 0; n < h.cols() / tok; ++n) h.middleCols(n * tok, tok) += table.value;
  }

  void backward(const Mat<T>& dh) {
    if (!table.trainable()) return;
    const Eigen::Index tok = table.value.cols();
    for (Eigen::Index n = 0; n < dh.cols() / tok; ++n) table.grad += dh.middleCols(n * tok, tok);
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f, const std::string& prefix) {
    f(prefix + ".table", self.table);
  }
};

/// Parameter-free RMS normalization of every column (token).
template <typename T>
struct RmsNorm {
  static constexpr double kEps = 1e-6;

  // Returns h / rms(h) per column; inv_rms receives 1 / rms.
  static Mat<T> forward(const Mat<T>& h, RowVec<T>& inv_rms) {
    const T n = static_cast<T>(h.rows());
    inv_rms = ((h.array().square().colwise().sum() / n) + static_cast<T>(kEps)).rsqrt().matrix();
    return h * inv_rms.asDiagonal();
  }

  // df: gradient on the normalized output f; returns the gradient on h.
  static Mat<T> backward(const Mat<T>& f, const RowVec<T>& inv_rms, const Mat<T>& df) {
    const T n = static_cast<T>(f.rows());
    const RowVec<T> proj = (df.cwiseProduct(f).colwise().sum() / n).matrix();
    return (df - f * proj.asDiagonal()) * inv_rms.asDiagonal();
  }
};

using TokenBatch = std::vector<std::vector<int>>;

inline constexpr int kTimeFeatures = 16;

template <typename T>
Mat<T> time_features(const std::vector<T>& t) {
  Mat<T> out(kTimeFeatures, static_cast<Eigen::Index>(t.size()));
  for (size_t n = 0; n < t.size(); ++n) {
    for (int k = 0; k < kTimeFeatures / 2; ++k) {
      const T w = static_cast<T>(std::numbers::pi / 2.0 * std::pow(2.0, k));
      out(2 * k, n) = std::sin(w * t[n]);
      out(2 * k + 1, n) = std::cos(w * t[n]);
    }
  }
  return out;
}

/// Timestep features + mean-pooled prompt embedding -> conditioning vector.
template <typename T>
struct ConditionEncoder {
  Param<T> table;  // embed_dim x vocab
  Linear<T> mlp;

  struct Tape {
    Mat<T> features;
    Mat<T> pre;
  };

  ConditionEncoder() = default;
  ConditionEncoder(int vocab, int embed_dim, int cond_dim) : mlp(kTimeFeatures + embed_dim, cond_dim) {
    table.value = Mat<T>::Zero(embed_dim, vocab);
  }

  void init_normal(std::mt19937_64& rng) {
    fill_normal(table.value, rng, 1.0);
    mlp.init_normal(rng);
  }

  int embed_dim() const { return static_cast<int>(table.value.rows()); }

  Mat<T> forward(const std::vector<T>& t, const TokenBatch& prompts, Tape* tape) const {
    require(prompts.size() == t.size(), ErrorKind::ShapeMismatch, "prompt batch size != timestep batch size");
    const Eigen::Index n = static_cast<Eigen::Index>(t.size());
    Mat<T> features(kTimeFeatures + embed_dim(), n);
    features.topRows(kTimeFeatures) = time_features(t);
    features.bottomRows(embed_dim()).setZero();
    for (Eigen::Index s = 0; s < n; ++s) {
      const auto& ids = prompts[s];
      for (int id : ids) {
        require(id >= 0 && id < table.value.cols(), ErrorKind::UnknownToken, "token id out of range");
        features.col(s).tail(embed_dim()) += table.value.col(id);
      }
      if (!ids.empty()) features.col(s).tail(embed_dim()) /= static_cast<T>(ids.size());
    }
    Mat<T> pre = mlp.forward(features);
    Mat<T> cond = silu(pre);
    if (tape) {
      tape->features = std::move(features);
      tape->pre = std::move(pre);
    }
    return cond;
  }

  void backward(const Tape& tape, const TokenBatch& prompts, const Mat<T>& dcond) {
    const Mat<T> dpre = silu_backward(tape.pre, dcond);
    const bool want_dx = table.trainable();
    const Mat<T> dfeat = mlp.backward(tape.features, dpre, want_dx);
    if (!want_dx) return;
    for (size_t s = 0; s < prompts.size(); ++s) {
      const auto& ids = prompts[s];
      if (ids.empty()) continue;
      const T scale = T(1) / static_cast<T>(ids.size());
      for (int id : ids) table.grad.col(id) += scale * dfeat.col(s).tail(embed_dim());
    }
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f, const std::string& prefix) {
    f(prefix + ".table", self.table);
    decltype(self.mlp)::visit(self.mlp, f, prefix + ".mlp");
  }
};

}  // namespace refine
