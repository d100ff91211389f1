#pragma once

#include <span>

#include "spade/tensor.hpp"

// Forward/backward pairs for the layers used by the network. Backward
// functions accumulate parameter gradients into the provided spans and return
// (or write) the gradient with respect to the layer input.
namespace spade::nn {

/// Sum of the values in `scratch` after sorting them, so the result depends
/// only on the multiset of values. Pooling uses it so that permuting the
/// input (flips, quarter turns) permutes the output bit-exactly.
double invariant_sum(std::span<double> scratch);

/// 3D convolution, cubic kernel of odd size k, zero "same" padding, stride 1.
/// weight layout: [out][in][kd][kh][kw].
Tensor conv3d(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
              std::int64_t out_channels, int k);
Tensor conv3d_backward(const Tensor& x, std::span<const double> weight, const Tensor& dy, int k,
                       std::span<double> dweight, std::span<double> dbias, bool need_dx = true);

/// Per-sample normalization over all channels and voxels followed by a
/// per-channel gain and shift. Statistics use invariant sums.
struct LayerNormState {
  Tensor xhat;
  double inv_std = 1.0;
};
Tensor layer_norm(const Tensor& x, std::span<const double> gain, std::span<const double> shift, LayerNormState& st);
Tensor layer_norm_backward(const LayerNormState& st, std::span<const double> gain, const Tensor& dy,
                           std::span<double> dgain, std::span<double> dshift);

void relu_inplace(Tensor& x);
/// Masks `dy` by y > 0.
void relu_backward_inplace(const Tensor& y, Tensor& dy);

/// 2x2x2 average pooling with stride 2; all spatial dims must be even.
Tensor avgpool2(const Tensor& x);
Tensor avgpool2_backward(const Tensor& dy);

/// Nearest-neighbour 2x upsampling.
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& dy);

Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Mean over all voxels per channel.
std::vector<double> global_avgpool(const Tensor& x);
Tensor global_avgpool_backward(const std::array<std::int64_t, 4>& shape, std::span<const double> dy);

/// Averages depth away and pools height/width into a grid x grid map with
/// adaptive bins [floor(i n / g), ceil((i + 1) n / g)).
Tensor grid_pool(const Tensor& x, int grid);
Tensor grid_pool_backward(const std::array<std::int64_t, 4>& in_shape, const Tensor& dy, int grid);

/// y = W x + b, W row-major [out][in].
std::vector<double> linear(std::span<const double> x, std::span<const double> weight, std::span<const double> bias,
                           std::size_t out);
std::vector<double> linear_backward(std::span<const double> x, std::span<const double> weight,
                                    std::span<const double> dy, std::span<double> dweight, std::span<double> dbias);

/// y = x / ||x||. Throws DegenerateInputError when ||x|| is (numerically) zero.
std::vector<double> l2_normalize(std::span<const double> x, double& norm);
std::vector<double> l2_normalize_backward(std::span<const double> y, double norm, std::span<const double> dy);

void sigmoid_inplace(Tensor& x);
/// dy * y * (1 - y), in place on dy.
void sigmoid_backward_inplace(const Tensor& y, Tensor& dy);

}  // namespace spade::nn
