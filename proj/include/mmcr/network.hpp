#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "mmcr/image.hpp"

namespace mmcr::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A batch of feature maps stored channel-major: row c holds channel c of
/// every image, image b occupying columns [b*h*w, (b+1)*h*w).
struct Activation {
  int batch = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  Matrix data;

  int plane() const { return height * width; }
};

/// Converts RGB images (all of one size) into a normalized input batch.
Activation to_input(std::span<const Image> images);
Activation to_input(std::span<const Image* const> images);

enum class Preset { tiny, small, base };
const char* to_string(Preset preset);
Preset parse_preset(const std::string& text);

struct Architecture {
  Preset preset = Preset::tiny;
  int input_size = 224;
  int embedding_dim = 256;
  int num_classes = 2;

  /// Output channels of each convolution, and which ones are followed by 2x2 max pooling.
  struct ConvSpec {
    int out_channels;
    int stride;
    bool pool_after;
  };
  std::vector<ConvSpec> convs() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Conv3x3 {
  int in_channels;
  int out_channels;
  int stride;
  std::size_t weight;  // [out x in*9]
};
struct BatchNorm {
  int channels;
  std::size_t gamma;  // [channels x 1]
  std::size_t beta;
  std::size_t mean;  // population statistics (buffers)
  std::size_t var;
};
struct Relu {};
struct MaxPool2 {};
struct GlobalAvgPool {};
struct Dense {
  int in_features;
  int out_features;
  std::size_t weight;  // [out x in]
  std::size_t bias;    // [out x 1]
};

using Layer = std::variant<Conv3x3, BatchNorm, Relu, MaxPool2, GlobalAvgPool, Dense>;

struct Tensor {
  std::string name;
  Matrix value;
  bool trainable = true;
};

/// Per-layer state kept by a training forward pass for the backward pass.
struct LayerCache {
  Activation input;
  Matrix aux;                // im2col columns or normalized activations
  Eigen::VectorXd inv_std;   // batch norm
  std::vector<int> argmax;   // max pooling
};

struct ForwardTrace {
  std::vector<LayerCache> caches;
  Matrix probabilities;  // [classes x batch]
};

inline constexpr double kBatchNormEpsilon = 1e-5;

/// Convolutional classifier: conv/bn/relu stack, global average pooling, a
/// ReLU embedding stage and a softmax output stage. The embedding is the
/// output of the layer just before the output stage.
class Network {
 public:
  Network() = default;
  Network(const Architecture& arch, std::uint64_t seed);

  const Architecture& architecture() const { return arch_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  /// Layers before this index produce the embedding; the rest is the output stage.
  std::size_t head_begin() const { return head_begin_; }

  /// Inference (population batch-norm statistics). Returns [classes x batch].
  Matrix predict(const Activation& input) const;
  /// Inference up to the embedding. Returns [embedding_dim x batch].
  Matrix embed(const Activation& input) const;
  /// Output stage applied to embeddings [embedding_dim x batch]; returns probabilities.
  Matrix classify_embeddings(const Matrix& embeddings) const;

  /// Training-mode forward (batch statistics); fills the trace for backward.
  ForwardTrace forward_train(const Activation& input) const;
  /// Mean cross-entropy of a trace against labels.
  static double loss(const ForwardTrace& trace, std::span<const int> labels);
  /// Accumulates d(mean cross-entropy)/d(tensor) into grads (same layout as tensors()).
  void backward(const ForwardTrace& trace, std::span<const int> labels,
                std::vector<Matrix>& grads) const;

  std::vector<Matrix> zero_gradients() const;

  /// Inference-mode forward through layers [0, end).
  Activation run_prefix(const Activation& input, std::size_t end) const;
  /// Replaces every batch-norm's population statistics with the exact
  /// mean/variance over the given inputs, layer by layer in order.
  void estimate_population_statistics(std::span<const Image* const> images,
                                      std::size_t chunk_size);

  /// Replaces the output stage with a freshly initialized one for num_classes.
  void reset_head(int num_classes, std::uint64_t seed);

  std::size_t parameter_count() const;

 private:
  void build(std::mt19937_64& rng);
  std::size_t add_tensor(std::string name, Matrix value, bool trainable);
  Activation apply(const Layer& layer, const Activation& x) const;
  Activation apply_train(const Layer& layer, const Activation& x, LayerCache& cache) const;
  Activation back(const Layer& layer, const LayerCache& cache, const Activation& grad,
                  std::vector<Matrix>& grads) const;

  Architecture arch_;
  std::vector<Layer> layers_;
  std::vector<Tensor> tensors_;
  std::size_t head_begin_ = 0;
};

/// Column-wise softmax of logits [classes x batch].
Matrix softmax_columns(const Matrix& logits);

}  // namespace mmcr::nn
