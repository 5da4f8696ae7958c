#include "mmcr/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "mmcr/error.hpp"

namespace mmcr::nn {

namespace {

// Upper bound on im2col elements materialized at once during inference.
constexpr Eigen::Index kColumnBudget = 1 << 23;

constexpr double kInputMean = 0.5;
constexpr double kInputScale = 0.25;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

int conv_out(int size, int stride) { return (size - 1) / stride + 1; }

void check_input(const Architecture& arch, const Activation& input) {
  if (input.height != arch.input_size || input.width != arch.input_size ||
      input.channels != Image::kChannels) {
    fail(ErrorKind::shape,
         fmt::format("model expects {}x{}x{} input, got {}x{}x{}", arch.input_size,
                     arch.input_size, Image::kChannels, input.width, input.height, input.channels));
  }
}

Matrix im2col(const Activation& x, int stride, int first_image, int images) {
  const int ho = conv_out(x.height, stride);
  const int wo = conv_out(x.width, stride);
  const Eigen::Index out_plane = static_cast<Eigen::Index>(ho) * wo;
  Matrix cols(static_cast<Eigen::Index>(x.channels) * 9, out_plane * images);
  for (int c = 0; c < x.channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = cols.row(c * 9 + ky * 3 + kx).data();
        for (int b = 0; b < images; ++b) {
          const double* src = x.data.row(c).data() +
                              static_cast<Eigen::Index>(first_image + b) * x.plane();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - 1;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - 1;
              *dst++ = (iy >= 0 && iy < x.height && ix >= 0 && ix < x.width)
                           ? src[iy * x.width + ix]
                           : 0.0;
            }
          }
        }
      }
    }
  }
  return cols;
}

void col2im(const Matrix& cols, int stride, Activation& dx) {
  const int ho = conv_out(dx.height, stride);
  const int wo = conv_out(dx.width, stride);
  dx.data.setZero();
  for (int c = 0; c < dx.channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = cols.row(c * 9 + ky * 3 + kx).data();
        for (int b = 0; b < dx.batch; ++b) {
          double* dst = dx.data.row(c).data() + static_cast<Eigen::Index>(b) * dx.plane();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - 1;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - 1;
              const double v = *src++;
              if (iy >= 0 && iy < dx.height && ix >= 0 && ix < dx.width) dst[iy * dx.width + ix] += v;
            }
          }
        }
      }
    }
  }
}

Activation like(const Activation& x, int channels, int height, int width) {
  Activation out;
  out.batch = x.batch;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.data.resize(channels, static_cast<Eigen::Index>(x.batch) * height * width);
  return out;
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

const char* to_string(Preset preset) {
  switch (preset) {
    case Preset::tiny: return "tiny";
    case Preset::small: return "small";
    case Preset::base: return "base";
  }
  return "tiny";
}

Preset parse_preset(const std::string& text) {
  if (text == "tiny") return Preset::tiny;
  if (text == "small") return Preset::small;
  if (text == "base") return Preset::base;
  fail(ErrorKind::usage, fmt::format("unknown architecture preset '{}'", text));
}

std::vector<Architecture::ConvSpec> Architecture::convs() const {
  switch (preset) {
    case Preset::tiny:
      return {{8, 1, true}, {16, 1, true}, {32, 1, false}};
    case Preset::small:
      return {{16, 1, false}, {16, 1, true}, {32, 1, false},
              {32, 1, true},  {64, 1, false}, {64, 1, false}};
    case Preset::base:
      return {{32, 2, false}, {32, 1, true},   {64, 1, false},  {64, 1, true},
              {128, 1, false}, {128, 1, true}, {256, 1, false}, {256, 1, false}};
  }
  return {};
}

Activation to_input(std::span<const Image* const> images) {
  Activation x;
  if (images.empty()) return x;
  x.batch = static_cast<int>(images.size());
  x.channels = Image::kChannels;
  x.height = images.front()->height;
  x.width = images.front()->width;
  x.data.resize(x.channels, static_cast<Eigen::Index>(x.batch) * x.plane());
  for (int b = 0; b < x.batch; ++b) {
    const Image& img = *images[b];
    if (img.width != x.width || img.height != x.height) {
      fail(ErrorKind::shape, fmt::format("batch mixes image sizes {}x{} and {}x{}", x.width,
                                         x.height, img.width, img.height));
    }
    for (int c = 0; c < x.channels; ++c) {
      double* dst = x.data.row(c).data() + static_cast<Eigen::Index>(b) * x.plane();
      for (int i = 0; i < x.plane(); ++i) {
        dst[i] = (img.pixels[static_cast<std::size_t>(i) * Image::kChannels + c] / 255.0 - kInputMean) /
                 kInputScale;
      }
    }
  }
  return x;
}

Activation to_input(std::span<const Image> images) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& img : images) ptrs.push_back(&img);
  return to_input(std::span<const Image* const>(ptrs));
}

Network::Network(const Architecture& arch, std::uint64_t seed) : arch_(arch) {
  if (arch.input_size < 8) fail(ErrorKind::usage, "input size must be >= 8");
  if (arch.embedding_dim < 1) fail(ErrorKind::usage, "embedding dimension must be positive");
  if (arch.num_classes < 1) fail(ErrorKind::usage, "at least one class is required");
  std::mt19937_64 rng(seed);
  build(rng);
}

std::size_t Network::add_tensor(std::string name, Matrix value, bool trainable) {
  tensors_.push_back({std::move(name), std::move(value), trainable});
  return tensors_.size() - 1;
}

void Network::build(std::mt19937_64& rng) {
  int channels = Image::kChannels;
  int index = 0;
  for (const auto& spec : arch_.convs()) {
    const std::string prefix = fmt::format("conv{}", index++);
    auto w = add_tensor(prefix + ".weight",
                        normal_matrix(spec.out_channels, channels * 9,
                                      std::sqrt(2.0 / (channels * 9)), rng),
                        true);
    layers_.push_back(Conv3x3{channels, spec.out_channels, spec.stride, w});
    BatchNorm bn{spec.out_channels, 0, 0, 0, 0};
    bn.gamma = add_tensor(prefix + ".bn.gamma", Matrix::Ones(spec.out_channels, 1), true);
    bn.beta = add_tensor(prefix + ".bn.beta", Matrix::Zero(spec.out_channels, 1), true);
    bn.mean = add_tensor(prefix + ".bn.mean", Matrix::Zero(spec.out_channels, 1), false);
    bn.var = add_tensor(prefix + ".bn.var", Matrix::Ones(spec.out_channels, 1), false);
    layers_.push_back(bn);
    layers_.push_back(Relu{});
    if (spec.pool_after) layers_.push_back(MaxPool2{});
    channels = spec.out_channels;
  }
  layers_.push_back(GlobalAvgPool{});
  auto ew = add_tensor("embedding.weight",
                       normal_matrix(arch_.embedding_dim, channels, std::sqrt(2.0 / channels), rng),
                       true);
  auto eb = add_tensor("embedding.bias", Matrix::Zero(arch_.embedding_dim, 1), true);
  layers_.push_back(Dense{channels, arch_.embedding_dim, ew, eb});
  layers_.push_back(Relu{});
  head_begin_ = layers_.size();
  auto hw = add_tensor("output.weight",
                       normal_matrix(arch_.num_classes, arch_.embedding_dim,
                                     std::sqrt(1.0 / arch_.embedding_dim), rng),
                       true);
  auto hb = add_tensor("output.bias", Matrix::Zero(arch_.num_classes, 1), true);
  layers_.push_back(Dense{arch_.embedding_dim, arch_.num_classes, hw, hb});
}

void Network::reset_head(int num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto& head = std::get<Dense>(layers_.at(head_begin_));
  tensors_[head.weight].value =
      normal_matrix(num_classes, arch_.embedding_dim, std::sqrt(1.0 / arch_.embedding_dim), rng);
  tensors_[head.bias].value = Matrix::Zero(num_classes, 1);
  head.out_features = num_classes;
  arch_.num_classes = num_classes;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) {
    if (t.trainable) n += static_cast<std::size_t>(t.value.size());
  }
  return n;
}

std::vector<Matrix> Network::zero_gradients() const {
  std::vector<Matrix> grads;
  grads.reserve(tensors_.size());
  for (const auto& t : tensors_) grads.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
  return grads;
}

Activation Network::apply(const Layer& layer, const Activation& x) const {
  return std::visit(
      Overloaded{
          [&](const Conv3x3& conv) {
            const int ho = conv_out(x.height, conv.stride);
            const int wo = conv_out(x.width, conv.stride);
            Activation y = like(x, conv.out_channels, ho, wo);
            const Eigen::Index per_image = static_cast<Eigen::Index>(x.channels) * 9 * ho * wo;
            const int chunk =
                static_cast<int>(std::max<Eigen::Index>(1, kColumnBudget / std::max<Eigen::Index>(per_image, 1)));
            const Matrix& w = tensors_[conv.weight].value;
            for (int b = 0; b < x.batch; b += chunk) {
              const int n = std::min(chunk, x.batch - b);
              Matrix cols = im2col(x, conv.stride, b, n);
              y.data.middleCols(static_cast<Eigen::Index>(b) * ho * wo,
                                static_cast<Eigen::Index>(n) * ho * wo).noalias() = w * cols;
            }
            return y;
          },
          [&](const BatchNorm& bn) {
            Activation y = like(x, x.channels, x.height, x.width);
            const auto& gamma = tensors_[bn.gamma].value;
            const auto& beta = tensors_[bn.beta].value;
            const auto& mean = tensors_[bn.mean].value;
            const auto& var = tensors_[bn.var].value;
            for (int c = 0; c < x.channels; ++c) {
              const double scale = gamma(c, 0) / std::sqrt(var(c, 0) + kBatchNormEpsilon);
              const double shift = beta(c, 0) - mean(c, 0) * scale;
              y.data.row(c) = (x.data.row(c).array() * scale + shift).matrix();
            }
            return y;
          },
          [&](const Relu&) {
            Activation y = like(x, x.channels, x.height, x.width);
            y.data = x.data.cwiseMax(0.0);
            return y;
          },
          [&](const MaxPool2&) {
            const int ho = x.height / 2, wo = x.width / 2;
            Activation y = like(x, x.channels, ho, wo);
            for (int c = 0; c < x.channels; ++c) {
              for (int b = 0; b < x.batch; ++b) {
                const double* src = x.data.row(c).data() + static_cast<Eigen::Index>(b) * x.plane();
                double* dst = y.data.row(c).data() + static_cast<Eigen::Index>(b) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                  for (int ox = 0; ox < wo; ++ox) {
                    const double* p = src + (2 * oy) * x.width + 2 * ox;
                    dst[oy * wo + ox] = std::max(std::max(p[0], p[1]), std::max(p[x.width], p[x.width + 1]));
                  }
                }
              }
            }
            return y;
          },
          [&](const GlobalAvgPool&) {
            Activation y = like(x, x.channels, 1, 1);
            for (int b = 0; b < x.batch; ++b) {
              y.data.col(b) = x.data.middleCols(static_cast<Eigen::Index>(b) * x.plane(), x.plane())
                                  .rowwise()
                                  .mean();
            }
            return y;
          },
          [&](const Dense& dense) {
            if (x.channels * x.plane() != dense.in_features) {
              fail(ErrorKind::shape, fmt::format("dense layer expects {} features, got {}",
                                                 dense.in_features, x.channels * x.plane()));
            }
            Activation y = like(x, dense.out_features, 1, 1);
            y.data.noalias() = tensors_[dense.weight].value * x.data;
            y.data.colwise() += tensors_[dense.bias].value.col(0);
            return y;
          },
      },
      layer);
}

Activation Network::apply_train(const Layer& layer, const Activation& x, LayerCache& cache) const {
  cache.input = x;
  return std::visit(
      Overloaded{
          [&](const Conv3x3& conv) {
            const int ho = conv_out(x.height, conv.stride);
            const int wo = conv_out(x.width, conv.stride);
            Activation y = like(x, conv.out_channels, ho, wo);
            cache.aux = im2col(x, conv.stride, 0, x.batch);
            y.data.noalias() = tensors_[conv.weight].value * cache.aux;
            return y;
          },
          [&](const BatchNorm& bn) {
            Activation y = like(x, x.channels, x.height, x.width);
            const auto& gamma = tensors_[bn.gamma].value;
            const auto& beta = tensors_[bn.beta].value;
            cache.aux.resize(x.data.rows(), x.data.cols());
            cache.inv_std.resize(x.channels);
            for (int c = 0; c < x.channels; ++c) {
              const double mean = x.data.row(c).mean();
              const double var = (x.data.row(c).array() - mean).square().mean();
              const double inv_std = 1.0 / std::sqrt(var + kBatchNormEpsilon);
              cache.inv_std(c) = inv_std;
              cache.aux.row(c) = ((x.data.row(c).array() - mean) * inv_std).matrix();
              y.data.row(c) = (cache.aux.row(c).array() * gamma(c, 0) + beta(c, 0)).matrix();
            }
            return y;
          },
          [&](const MaxPool2&) {
            const int ho = x.height / 2, wo = x.width / 2;
            Activation y = like(x, x.channels, ho, wo);
            cache.argmax.assign(static_cast<std::size_t>(y.data.size()), 0);
            std::size_t k = 0;
            for (int c = 0; c < x.channels; ++c) {
              for (int b = 0; b < x.batch; ++b) {
                const Eigen::Index base = static_cast<Eigen::Index>(b) * x.plane();
                const double* src = x.data.row(c).data() + base;
                double* dst = y.data.row(c).data() + static_cast<Eigen::Index>(b) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                  for (int ox = 0; ox < wo; ++ox) {
                    int best = (2 * oy) * x.width + 2 * ox;
                    for (int off : {1, x.width, x.width + 1}) {
                      const int cand = (2 * oy) * x.width + 2 * ox + off;
                      if (src[cand] > src[best]) best = cand;
                    }
                    dst[oy * wo + ox] = src[best];
                    cache.argmax[k++] = static_cast<int>(base + best);
                  }
                }
              }
            }
            return y;
          },
          [&](const auto&) { return apply(layer, x); },
      },
      layer);
}

Activation Network::back(const Layer& layer, const LayerCache& cache, const Activation& grad,
                         std::vector<Matrix>& grads) const {
  const Activation& x = cache.input;
  return std::visit(
      Overloaded{
          [&](const Conv3x3& conv) {
            const Matrix& w = tensors_[conv.weight].value;
            grads[conv.weight].noalias() += grad.data * cache.aux.transpose();
            Matrix dcols = w.transpose() * grad.data;
            Activation dx = like(x, x.channels, x.height, x.width);
            col2im(dcols, conv.stride, dx);
            return dx;
          },
          [&](const BatchNorm& bn) {
            const auto& gamma = tensors_[bn.gamma].value;
            Activation dx = like(x, x.channels, x.height, x.width);
            const double m = static_cast<double>(x.data.cols());
            for (int c = 0; c < x.channels; ++c) {
              auto dy = grad.data.row(c).array();
              auto xhat = cache.aux.row(c).array();
              grads[bn.gamma](c, 0) += (dy * xhat).sum();
              grads[bn.beta](c, 0) += dy.sum();
              const Eigen::ArrayXd dxhat = (dy * gamma(c, 0)).transpose();
              const double sum_dxhat = dxhat.sum();
              const double sum_dxhat_xhat = (dxhat * xhat.transpose()).sum();
              dx.data.row(c) = ((m * dxhat - sum_dxhat - xhat.transpose() * sum_dxhat_xhat) *
                                (cache.inv_std(c) / m))
                                   .transpose()
                                   .matrix();
            }
            return dx;
          },
          [&](const Relu&) {
            Activation dx = like(x, x.channels, x.height, x.width);
            dx.data = (x.data.array() > 0.0).select(grad.data, 0.0);
            return dx;
          },
          [&](const MaxPool2&) {
            Activation dx = like(x, x.channels, x.height, x.width);
            dx.data.setZero();
            std::size_t k = 0;
            for (int c = 0; c < x.channels; ++c) {
              const double* g = grad.data.row(c).data();
              double* d = dx.data.row(c).data();
              for (Eigen::Index i = 0; i < grad.data.cols(); ++i) d[cache.argmax[k++]] += g[i];
            }
            return dx;
          },
          [&](const GlobalAvgPool&) {
            Activation dx = like(x, x.channels, x.height, x.width);
            const double inv = 1.0 / x.plane();
            for (int b = 0; b < x.batch; ++b) {
              for (int c = 0; c < x.channels; ++c) {
                dx.data.row(c)
                    .segment(static_cast<Eigen::Index>(b) * x.plane(), x.plane())
                    .setConstant(grad.data(c, b) * inv);
              }
            }
            return dx;
          },
          [&](const Dense& dense) {
            grads[dense.weight].noalias() += grad.data * x.data.transpose();
            grads[dense.bias].col(0) += grad.data.rowwise().sum();
            Activation dx = like(x, x.channels, x.height, x.width);
            dx.data.noalias() = tensors_[dense.weight].value.transpose() * grad.data;
            return dx;
          },
      },
      layer);
}

Matrix softmax_columns(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    const double mx = logits.col(b).maxCoeff();
    p.col(b) = (logits.col(b).array() - mx).exp().matrix();
    p.col(b) /= p.col(b).sum();
  }
  return p;
}

Activation Network::run_prefix(const Activation& input, std::size_t end) const {
  Activation x = input;
  for (std::size_t i = 0; i < end && i < layers_.size(); ++i) x = apply(layers_[i], x);
  return x;
}

Matrix Network::embed(const Activation& input) const {
  check_input(arch_, input);
  return run_prefix(input, head_begin_).data;
}

Matrix Network::classify_embeddings(const Matrix& embeddings) const {
  Activation x;
  x.batch = static_cast<int>(embeddings.cols());
  x.channels = static_cast<int>(embeddings.rows());
  x.height = x.width = 1;
  x.data = embeddings;
  for (std::size_t i = head_begin_; i < layers_.size(); ++i) x = apply(layers_[i], x);
  return softmax_columns(x.data);
}

Matrix Network::predict(const Activation& input) const {
  return classify_embeddings(embed(input));
}

ForwardTrace Network::forward_train(const Activation& input) const {
  check_input(arch_, input);
  ForwardTrace trace;
  trace.caches.resize(layers_.size());
  Activation x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) x = apply_train(layers_[i], x, trace.caches[i]);
  trace.probabilities = softmax_columns(x.data);
  return trace;
}

double Network::loss(const ForwardTrace& trace, std::span<const int> labels) {
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    total -= std::log(std::max(trace.probabilities(labels[b], static_cast<Eigen::Index>(b)),
                               std::numeric_limits<double>::min()));
  }
  return total / static_cast<double>(labels.size());
}

void Network::backward(const ForwardTrace& trace, std::span<const int> labels,
                       std::vector<Matrix>& grads) const {
  const auto batch = static_cast<Eigen::Index>(labels.size());
  Activation grad;
  grad.batch = static_cast<int>(batch);
  grad.channels = static_cast<int>(trace.probabilities.rows());
  grad.height = grad.width = 1;
  grad.data = trace.probabilities;
  for (Eigen::Index b = 0; b < batch; ++b) grad.data(labels[b], b) -= 1.0;
  grad.data /= static_cast<double>(batch);
  for (std::size_t i = layers_.size(); i-- > 0;) grad = back(layers_[i], trace.caches[i], grad, grads);
}

void Network::estimate_population_statistics(std::span<const Image* const> images,
                                             std::size_t chunk_size) {
  if (images.empty()) return;
  chunk_size = std::max<std::size_t>(chunk_size, 1);
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const auto* bn = std::get_if<BatchNorm>(&layers_[li]);
    if (!bn) continue;
    // Chan et al. pairwise combination of per-chunk mean / M2.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(bn->channels);
    Eigen::VectorXd m2 = Eigen::VectorXd::Zero(bn->channels);
    double count = 0.0;
    for (std::size_t start = 0; start < images.size(); start += chunk_size) {
      auto chunk = images.subspan(start, std::min(chunk_size, images.size() - start));
      Activation x = run_prefix(to_input(chunk), li);
      const double n = static_cast<double>(x.data.cols());
      for (int c = 0; c < bn->channels; ++c) {
        const double chunk_mean = x.data.row(c).mean();
        const double chunk_m2 = (x.data.row(c).array() - chunk_mean).square().sum();
        const double delta = chunk_mean - mean(c);
        const double total = count + n;
        mean(c) += delta * n / total;
        m2(c) += chunk_m2 + delta * delta * count * n / total;
      }
      count += n;
    }
    tensors_[bn->mean].value.col(0) = mean;
    tensors_[bn->var].value.col(0) = m2 / count;
  }
}

}  // namespace mmcr::nn
