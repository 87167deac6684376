#pragma once

#include <span>
#include <vector>

#include "tubelet/graph.hpp"
#include "tubelet/tensor.hpp"

namespace tubelet {

// Plain forward kernels. Spatial operations accept a single map (C x H x W)
// or a batch (N x C x H x W); the batch axis is carried through unchanged.

int conv_output_size(int in, int kernel, int stride, int padding);

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias, int stride, int padding);

template <typename T>
BasicTensor<T> leaky_relu_forward(const BasicTensor<T>& x, T slope);

/// Numerically stable log(1 + exp(z)).
double softplus(double z);

// Graph operations. Each records one node and its exact derivative.

template <typename T>
Var conv2d(Graph<T>& g, Var input, Var weight, Var bias, int stride, int padding);

/// Gradient flows to the first maximum in row-major window order.
template <typename T>
Var max_pool2d(Graph<T>& g, Var input, int window, int stride);

/// Per-channel global maximum: C x H x W -> C x 1 x 1 (batched: N x C x 1 x 1).
template <typename T>
Var adaptive_max_pool2d(Graph<T>& g, Var input);

/// y = W x + b for x of length N (or each row of a B x N batch).
template <typename T>
Var fully_connected(Graph<T>& g, Var input, Var weight, Var bias);

template <typename T>
Var leaky_relu(Graph<T>& g, Var x, double slope);

template <typename T>
Var sigmoid(Graph<T>& g, Var x);

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var mul(Graph<T>& g, Var a, Var b);

template <typename T>
Var scale(Graph<T>& g, Var x, double factor);

/// rows(a) * s + b, with `a` of shape B x C and `s`, `b` of length C.
template <typename T>
Var affine_rows(Graph<T>& g, Var a, Var s, Var b);

/// Multiplies channel c of x (C x H x W or N x C x H x W) by gate[c]
/// (gate shape C or N x C).
template <typename T>
Var scale_channels(Graph<T>& g, Var x, Var gate);

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape);

/// Contiguous range [begin, begin + length) of the flattened tensor, as a vector.
template <typename T>
Var slice(Graph<T>& g, Var x, int begin, int length);

/// Concatenation of the flattened inputs.
template <typename T>
Var concat(Graph<T>& g, Var a, Var b);

/// Elementwise maximum over the rows of a B x D tensor -> D.
template <typename T>
Var max_rows(Graph<T>& g, Var x);

template <typename T>
Var mean(Graph<T>& g, Var x);

template <typename T>
Var sum(Graph<T>& g, Var x);

/// Elementwise binary cross-entropy on logits; labels must be 0 or 1.
template <typename T>
Var sigmoid_bce(Graph<T>& g, Var logits, std::span<const int> labels);

}  // namespace tubelet
