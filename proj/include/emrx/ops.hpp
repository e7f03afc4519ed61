#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "emrx/rng.hpp"
#include "emrx/tensor.hpp"

namespace emrx {

enum class Mode { train, eval };

// Intra-op parallelism splits work over batch samples with a fixed shard
// layout and shard-ordered reductions, so results are deterministic for a
// fixed thread count. Default is one thread.
inline int& intra_op_threads_ref() {
  static int threads = 1;
  return threads;
}
inline void set_intra_op_threads(int threads) { intra_op_threads_ref() = std::max(1, threads); }
inline int intra_op_threads() { return intra_op_threads_ref(); }

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

template <typename S>
std::vector<S>& ensure_grad(const std::shared_ptr<TensorImpl<S>>& impl) {
  if (impl->grad.empty()) {
    impl->grad.assign(impl->data.size(), S(0));
  }
  return impl->grad;
}

inline void check_rank(const std::vector<int>& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_to_string(shape));
  }
}

// fn(sample_begin, sample_end, shard_index) over a static partition of [0, n).
template <typename F>
void parallel_over_samples(int n, int shards_wanted, F&& fn) {
  const int shards = std::max(1, std::min(shards_wanted, n));
  if (shards == 1) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(shards));
  const int base = n / shards;
  const int extra = n % shards;
  int start = 0;
  for (int s = 0; s < shards; ++s) {
    const int len = base + (s < extra ? 1 : 0);
    workers.emplace_back([&fn, start, len, s] { fn(start, start + len, s); });
    start += len;
  }
  for (std::thread& w : workers) w.join();
}

// Unpacks one [Cin,H,W] slab into a [Cin*9, H*W] patch matrix for a 3x3
// kernel with stride 1 and zero padding 1. Row (ci,dy,dx), column (y,x).
template <typename S>
void im2col_3x3(const S* x, int cin, int h, int w, S* patches) {
  const int m = h * w;
  for (int ci = 0; ci < cin; ++ci) {
    const S* chan = x + static_cast<std::int64_t>(ci) * m;
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        S* row = patches + static_cast<std::int64_t>((ci * 3 + dy) * 3 + dx) * m;
        const int x0 = std::max(0, 1 - dx);
        const int x1 = std::min(w, w + 1 - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy - 1;
          S* dst = row + static_cast<std::int64_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, S(0));
            continue;
          }
          if (x0 > 0) dst[0] = S(0);
          if (x1 < w) dst[w - 1] = S(0);
          const S* src = chan + static_cast<std::int64_t>(sy) * w + (x0 + dx - 1);
          std::copy(src, src + (x1 - x0), dst + x0);
        }
      }
    }
  }
}

// Transpose of im2col_3x3: scatter-adds a patch-matrix gradient back onto
// the [Cin,H,W] input gradient.
template <typename S>
void col2im_3x3_add(const S* patches, int cin, int h, int w, S* gx) {
  const int m = h * w;
  for (int ci = 0; ci < cin; ++ci) {
    S* chan = gx + static_cast<std::int64_t>(ci) * m;
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        const S* row = patches + static_cast<std::int64_t>((ci * 3 + dy) * 3 + dx) * m;
        const int x0 = std::max(0, 1 - dx);
        const int x1 = std::min(w, w + 1 - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          const S* src = row + static_cast<std::int64_t>(y) * w + x0;
          S* dst = chan + static_cast<std::int64_t>(sy) * w + (x0 + dx - 1);
          for (int i = 0; i < x1 - x0; ++i) dst[i] += src[i];
        }
      }
    }
  }
}

}  // namespace detail

// Lowest-index argmax, the tie-break used for predictions everywhere.
template <typename S>
int argmax_lowest(const S* row, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  Tensor<S> out(input.shape());
  const S* x = input.data();
  S* y = out.mutable_data();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > S(0) ? x[i] : S(0);
  if (tape && input.requires_grad()) {
    out.set_requires_grad(true);
    auto in_impl = input.impl();
    auto out_impl = out.impl();
    tape->record(out, {input}, [in_impl, out_impl] {
      const auto& go = out_impl->grad;
      auto& gi = detail::ensure_grad(in_impl);
      const auto& x = in_impl->data;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > S(0)) gi[i] += go[i];
      }
    });
  }
  return out;
}

// out = input * weight + bias, input [N,Din], weight [Din,Dout], bias [Dout].
template <typename S>
Tensor<S> dense(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                Tape<S>* tape = nullptr) {
  detail::check_rank(input.shape(), 2, "dense input");
  detail::check_rank(weight.shape(), 2, "dense weight");
  detail::check_rank(bias.shape(), 1, "dense bias");
  const int n = input.dim(0), din = input.dim(1);
  const int dout = weight.dim(1);
  if (weight.dim(0) != din || bias.dim(0) != dout) {
    throw std::invalid_argument("dense shape mismatch: input " + shape_to_string(input.shape()) +
                                ", weight " + shape_to_string(weight.shape()) + ", bias " +
                                shape_to_string(bias.shape()));
  }
  Tensor<S> out({n, dout});
  {
    detail::ConstMatMap<S> xm(input.data(), n, din);
    detail::ConstMatMap<S> wm(weight.data(), din, dout);
    detail::MatMap<S> ym(out.mutable_data(), n, dout);
    ym.noalias() = xm * wm;
    ym.rowwise() += detail::ConstVecMap<S>(bias.data(), dout).transpose();
  }
  if (tape && (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    auto in_impl = input.impl();
    auto w_impl = weight.impl();
    auto b_impl = bias.impl();
    auto out_impl = out.impl();
    tape->record(out, {input, weight, bias}, [in_impl, w_impl, b_impl, out_impl, n, din, dout] {
      detail::ConstMatMap<S> gy(out_impl->grad.data(), n, dout);
      if (in_impl->requires_grad) {
        detail::ConstMatMap<S> wm(w_impl->data.data(), din, dout);
        detail::MatMap<S> gx(detail::ensure_grad(in_impl).data(), n, din);
        gx.noalias() += gy * wm.transpose();
      }
      if (w_impl->requires_grad) {
        detail::ConstMatMap<S> xm(in_impl->data.data(), n, din);
        detail::MatMap<S> gw(detail::ensure_grad(w_impl).data(), din, dout);
        gw.noalias() += xm.transpose() * gy;
      }
      if (b_impl->requires_grad) {
        auto& gb = detail::ensure_grad(b_impl);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(gb.data(), dout) +=
            gy.colwise().sum().transpose();
      }
    });
  }
  return out;
}

// 3x3 convolution, stride 1, zero padding 1; spatial dimensions preserved.
// Realized as per-sample im2col + GEMM. input [N,Cin,H,W], weight
// [Cout,Cin,3,3], bias [Cout] -> [N,Cout,H,W].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 Tape<S>* tape = nullptr) {
  detail::check_rank(input.shape(), 4, "conv2d input");
  detail::check_rank(weight.shape(), 4, "conv2d weight");
  detail::check_rank(bias.shape(), 1, "conv2d bias");
  const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int cout = weight.dim(0);
  if (weight.dim(1) != cin || weight.dim(2) != 3 || weight.dim(3) != 3 || bias.dim(0) != cout) {
    throw std::invalid_argument("conv2d shape mismatch: input " + shape_to_string(input.shape()) +
                                ", weight " + shape_to_string(weight.shape()) + ", bias " +
                                shape_to_string(bias.shape()));
  }
  const int k = cin * 9;
  const std::int64_t m = static_cast<std::int64_t>(h) * w;
  Tensor<S> out({n, cout, h, w});
  {
    S* out_base = out.mutable_data();
    const S* in_base = input.data();
    detail::ConstMatMap<S> wm(weight.data(), cout, k);
    detail::ConstVecMap<S> bv(bias.data(), cout);
    detail::parallel_over_samples(n, intra_op_threads(), [&](int s0, int s1, int) {
      detail::RowMat<S> patches(k, m);
      for (int s = s0; s < s1; ++s) {
        detail::im2col_3x3(in_base + static_cast<std::int64_t>(s) * cin * m, cin, h, w, patches.data());
        detail::MatMap<S> ym(out_base + static_cast<std::int64_t>(s) * cout * m, cout, m);
        ym.noalias() = wm * patches;
        ym.colwise() += bv;
      }
    });
  }
  if (tape && (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    auto in_impl = input.impl();
    auto w_impl = weight.impl();
    auto b_impl = bias.impl();
    auto out_impl = out.impl();
    tape->record(out, {input, weight, bias}, [in_impl, w_impl, b_impl, out_impl, n, cin, h, w, cout, k, m] {
      const S* go_base = out_impl->grad.data();
      const S* in_base = in_impl->data.data();
      const bool need_gx = in_impl->requires_grad;
      const bool need_gw = w_impl->requires_grad;
      const bool need_gb = b_impl->requires_grad;
      S* gx_base = need_gx ? detail::ensure_grad(in_impl).data() : nullptr;
      const int shards = std::max(1, std::min(intra_op_threads(), n));
      // Weight/bias gradients sum over samples; give each shard its own
      // accumulator and reduce in shard order to keep results deterministic.
      std::vector<detail::RowMat<S>> gw_parts;
      std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb_parts;
      if (need_gw) gw_parts.assign(shards, detail::RowMat<S>::Zero(cout, k));
      if (need_gb) gb_parts.assign(shards, Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(cout));
      detail::ConstMatMap<S> wm(w_impl->data.data(), cout, k);
      detail::parallel_over_samples(n, shards, [&](int s0, int s1, int shard) {
        detail::RowMat<S> patches(k, m);
        detail::RowMat<S> gpatches;
        if (need_gx) gpatches.resize(k, m);
        for (int s = s0; s < s1; ++s) {
          detail::ConstMatMap<S> gy(go_base + static_cast<std::int64_t>(s) * cout * m, cout, m);
          if (need_gb) gb_parts[shard] += gy.rowwise().sum();
          if (need_gw) {
            detail::im2col_3x3(in_base + static_cast<std::int64_t>(s) * cin * m, cin, h, w, patches.data());
            gw_parts[shard].noalias() += gy * patches.transpose();
          }
          if (need_gx) {
            gpatches.noalias() = wm.transpose() * gy;
            detail::col2im_3x3_add(gpatches.data(), cin, h, w,
                                   gx_base + static_cast<std::int64_t>(s) * cin * m);
          }
        }
      });
      if (need_gw) {
        detail::MatMap<S> gw(detail::ensure_grad(w_impl).data(), cout, k);
        for (int s = 0; s < shards; ++s) gw += gw_parts[s];
      }
      if (need_gb) {
        auto& gb = detail::ensure_grad(b_impl);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gbm(gb.data(), cout);
        for (int s = 0; s < shards; ++s) gbm += gb_parts[s];
      }
    });
  }
  return out;
}

// 2x2 max pooling, stride 2. Odd trailing rows/columns are dropped. Backward
// routes each gradient to the first maximum in row-major window order.
template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  detail::check_rank(input.shape(), 4, "maxpool2d input");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < 2 || w < 2) {
    throw std::invalid_argument("maxpool2d needs spatial dims >= 2, got " +
                                shape_to_string(input.shape()));
  }
  const int ho = h / 2, wo = w / 2;
  Tensor<S> out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
  const S* x = input.data();
  S* y = out.mutable_data();
  std::int64_t o = 0;
  for (int img = 0; img < n * c; ++img) {
    const std::int64_t base = static_cast<std::int64_t>(img) * h * w;
    for (int yo = 0; yo < ho; ++yo) {
      for (int xo = 0; xo < wo; ++xo) {
        std::int64_t best = base + (2 * yo) * w + 2 * xo;
        S best_val = x[best];
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t idx = base + (2 * yo + dy) * w + (2 * xo + dx);
            if (x[idx] > best_val) {
              best_val = x[idx];
              best = idx;
            }
          }
        }
        y[o] = best_val;
        (*argmax)[static_cast<std::size_t>(o)] = best;
        ++o;
      }
    }
  }
  if (tape && input.requires_grad()) {
    out.set_requires_grad(true);
    auto in_impl = input.impl();
    auto out_impl = out.impl();
    tape->record(out, {input}, [in_impl, out_impl, argmax] {
      const auto& go = out_impl->grad;
      auto& gi = detail::ensure_grad(in_impl);
      for (std::size_t i = 0; i < go.size(); ++i) {
        gi[static_cast<std::size_t>((*argmax)[i])] += go[i];
      }
    });
  }
  return out;
}

// Inverted dropout: surviving activations are rescaled by 1/(1-rate) at
// train time so eval mode is an exact identity. rate == 0 is an identity in
// both modes and consumes no random draws.
template <typename S>
Tensor<S> dropout(const Tensor<S>& input, double rate, Mode mode, Rng& rng,
                  Tape<S>* tape = nullptr) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must be in [0,1), got " + std::to_string(rate));
  }
  if (mode == Mode::eval || rate == 0.0) {
    return input;
  }
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  const std::int64_t n = input.numel();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(n));
  Tensor<S> out(input.shape());
  const S* x = input.data();
  S* y = out.mutable_data();
  for (std::int64_t i = 0; i < n; ++i) {
    const bool keep = rng.uniform() >= rate;
    (*mask)[static_cast<std::size_t>(i)] = keep;
    y[i] = keep ? x[i] * scale : S(0);
  }
  if (tape && input.requires_grad()) {
    out.set_requires_grad(true);
    auto in_impl = input.impl();
    auto out_impl = out.impl();
    tape->record(out, {input}, [in_impl, out_impl, mask, scale] {
      const auto& go = out_impl->grad;
      auto& gi = detail::ensure_grad(in_impl);
      for (std::size_t i = 0; i < go.size(); ++i) {
        if ((*mask)[i]) gi[i] += go[i] * scale;
      }
    });
  }
  return out;
}

// Row-wise softmax with max subtraction. logits [N,K].
template <typename S>
Tensor<S> softmax(const Tensor<S>& logits, Tape<S>* tape = nullptr) {
  detail::check_rank(logits.shape(), 2, "softmax input");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor<S> out({n, k});
  const S* x = logits.data();
  S* p = out.mutable_data();
  for (int r = 0; r < n; ++r) {
    const S* row = x + static_cast<std::int64_t>(r) * k;
    S* prow = p + static_cast<std::int64_t>(r) * k;
    const double mx = static_cast<double>(*std::max_element(row, row + k));
    double z = 0.0;
    for (int i = 0; i < k; ++i) z += std::exp(static_cast<double>(row[i]) - mx);
    for (int i = 0; i < k; ++i) {
      prow[i] = static_cast<S>(std::exp(static_cast<double>(row[i]) - mx) / z);
    }
  }
  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    auto in_impl = logits.impl();
    auto out_impl = out.impl();
    tape->record(out, {logits}, [in_impl, out_impl, n, k] {
      const auto& go = out_impl->grad;
      const auto& p = out_impl->data;
      auto& gi = detail::ensure_grad(in_impl);
      for (int r = 0; r < n; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * k;
        double dot = 0.0;
        for (int i = 0; i < k; ++i) dot += static_cast<double>(go[off + i]) * p[off + i];
        for (int i = 0; i < k; ++i) {
          gi[off + i] += p[off + i] * (go[off + i] - static_cast<S>(dot));
        }
      }
    });
  }
  return out;
}

template <typename S>
struct CrossEntropyResult {
  Tensor<S> loss;   // scalar, mean over the batch
  Tensor<S> probs;  // [N,K] softmax probabilities, detached
};

// Mean categorical cross-entropy over log-softmax with per-row max
// subtraction. Backward produces (probs - onehot) / N on the logits.
template <typename S>
CrossEntropyResult<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                                            Tape<S>* tape = nullptr) {
  detail::check_rank(logits.shape(), 2, "softmax_cross_entropy logits");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(targets.size()) != n) {
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(n) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= k) {
      throw std::invalid_argument("softmax_cross_entropy: target " + std::to_string(t) +
                                  " out of range [0," + std::to_string(k) + ")");
    }
  }
  throw_if_not_finite(logits, "softmax_cross_entropy logits");
  Tensor<S> probs({n, k});
  const S* x = logits.data();
  S* p = probs.mutable_data();
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const S* row = x + static_cast<std::int64_t>(r) * k;
    S* prow = p + static_cast<std::int64_t>(r) * k;
    const double mx = static_cast<double>(*std::max_element(row, row + k));
    double z = 0.0;
    for (int i = 0; i < k; ++i) z += std::exp(static_cast<double>(row[i]) - mx);
    const double log_z = std::log(z);
    for (int i = 0; i < k; ++i) {
      prow[i] = static_cast<S>(std::exp(static_cast<double>(row[i]) - mx - log_z));
    }
    total -= static_cast<double>(row[targets[static_cast<std::size_t>(r)]]) - mx - log_z;
  }
  Tensor<S> loss = Tensor<S>::scalar(static_cast<S>(total / n));
  if (tape && logits.requires_grad()) {
    loss.set_requires_grad(true);
    auto in_impl = logits.impl();
    auto probs_impl = probs.impl();
    auto loss_impl = loss.impl();
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    tape->record(loss, {logits}, [in_impl, probs_impl, loss_impl, targets_copy, n, k] {
      const S g = loss_impl->grad[0];
      auto& gi = detail::ensure_grad(in_impl);
      const auto& p = probs_impl->data;
      const S inv_n = static_cast<S>(1.0 / n);
      for (int r = 0; r < n; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * k;
        const int t = (*targets_copy)[static_cast<std::size_t>(r)];
        for (int i = 0; i < k; ++i) {
          const S delta = (i == t) ? S(1) : S(0);
          gi[off + i] += g * (p[off + i] - delta) * inv_n;
        }
      }
    });
  }
  return {std::move(loss), std::move(probs)};
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& input, std::vector<int> shape, Tape<S>* tape = nullptr) {
  Tensor<S> out = Tensor<S>::from_data(std::move(shape),
                                       std::vector<S>(input.data(), input.data() + input.numel()));
  if (out.numel() != input.numel()) {
    throw std::invalid_argument("reshape changes element count");
  }
  if (tape && input.requires_grad()) {
    out.set_requires_grad(true);
    auto in_impl = input.impl();
    auto out_impl = out.impl();
    tape->record(out, {input}, [in_impl, out_impl] {
      const auto& go = out_impl->grad;
      auto& gi = detail::ensure_grad(in_impl);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    });
  }
  return out;
}

// [N, ...] -> [N, product of the rest].
template <typename S>
Tensor<S> flatten(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  if (input.rank() < 1) throw std::invalid_argument("flatten needs rank >= 1");
  const int n = input.dim(0);
  const int rest = static_cast<int>(input.numel() / n);
  return reshape(input, {n, rest}, tape);
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* y = out.mutable_data();
  for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = pa[i] + pb[i];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto a_impl = a.impl();
    auto b_impl = b.impl();
    auto out_impl = out.impl();
    tape->record(out, {a, b}, [a_impl, b_impl, out_impl] {
      const auto& go = out_impl->grad;
      if (a_impl->requires_grad) {
        auto& ga = detail::ensure_grad(a_impl);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b_impl->requires_grad) {
        auto& gb = detail::ensure_grad(b_impl);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mul shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* y = out.mutable_data();
  for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = pa[i] * pb[i];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto a_impl = a.impl();
    auto b_impl = b.impl();
    auto out_impl = out.impl();
    tape->record(out, {a, b}, [a_impl, b_impl, out_impl] {
      const auto& go = out_impl->grad;
      if (a_impl->requires_grad) {
        auto& ga = detail::ensure_grad(a_impl);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b_impl->data[i];
      }
      if (b_impl->requires_grad) {
        auto& gb = detail::ensure_grad(b_impl);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a_impl->data[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  double total = 0.0;
  const S* x = input.data();
  for (std::int64_t i = 0; i < input.numel(); ++i) total += static_cast<double>(x[i]);
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total));
  if (tape && input.requires_grad()) {
    out.set_requires_grad(true);
    auto in_impl = input.impl();
    auto out_impl = out.impl();
    tape->record(out, {input}, [in_impl, out_impl] {
      const S g = out_impl->grad[0];
      auto& gi = detail::ensure_grad(in_impl);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g;
    });
  }
  return out;
}

}  // namespace emrx
