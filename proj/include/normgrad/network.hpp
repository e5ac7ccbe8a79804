#ifndef NORMGRAD_NETWORK_HPP_
#define NORMGRAD_NETWORK_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "layers.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace normgrad {

enum class LayerKind { conv2d, relu, maxpool, avgpool, global_avg_pool, linear, flatten };

inline std::string_view layer_kind_name(LayerKind kind) {
	switch (kind) {
	case LayerKind::conv2d: return "conv2d";
	case LayerKind::relu: return "relu";
	case LayerKind::maxpool: return "maxpool";
	case LayerKind::avgpool: return "avgpool";
	case LayerKind::global_avg_pool: return "global_avg_pool";
	case LayerKind::linear: return "linear";
	case LayerKind::flatten: return "flatten";
	}
	return "unknown";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view s) {
	for (LayerKind k : {LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool, LayerKind::avgpool,
				 LayerKind::global_avg_pool, LayerKind::linear, LayerKind::flatten}) {
		if (layer_kind_name(k) == s) return k;
	}
	return std::nullopt;
}

/**
 * One stage of a chain network.
 *
 * conv2d: weight (out, in, kernel_h, kernel_w), bias (out), window = kernel/stride/padding.
 * linear: weight (out, in), bias (out).
 * maxpool/avgpool: window only (padding must be 0).
 * Other kinds carry no state. Biases take part in training but never in saliency.
 */
template <typename T>
struct BasicLayer {
	LayerKind kind = LayerKind::relu;
	std::string name;
	WindowGeometry window;
	std::size_t in_channels = 0;
	std::size_t out_channels = 0;
	BasicTensor<T> weight;
	BasicTensor<T> bias;

	bool has_params() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }

	static BasicLayer conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
			std::size_t stride = 1, std::size_t padding = 0) {
		BasicLayer l;
		l.kind = LayerKind::conv2d;
		l.name = std::move(name);
		l.window = {kernel, kernel, stride, padding};
		l.in_channels = in;
		l.out_channels = out;
		l.weight = BasicTensor<T>({out, in, kernel, kernel});
		l.bias = BasicTensor<T>({out});
		return l;
	}

	/// 1x1 stride-1 convolution with identity weights and zero bias.
	static BasicLayer identity_conv(std::string name, std::size_t channels) {
		BasicLayer l = conv2d(std::move(name), channels, channels, 1);
		for (std::size_t c = 0; c < channels; ++c) l.weight(c, c, 0, 0) = T(1);
		return l;
	}

	static BasicLayer linear(std::string name, std::size_t in, std::size_t out) {
		BasicLayer l;
		l.kind = LayerKind::linear;
		l.name = std::move(name);
		l.in_channels = in;
		l.out_channels = out;
		l.weight = BasicTensor<T>({out, in});
		l.bias = BasicTensor<T>({out});
		return l;
	}

	static BasicLayer relu(std::string name) { return simple(LayerKind::relu, std::move(name)); }
	static BasicLayer flatten(std::string name) { return simple(LayerKind::flatten, std::move(name)); }
	static BasicLayer global_avg_pool(std::string name) { return simple(LayerKind::global_avg_pool, std::move(name)); }

	static BasicLayer maxpool(std::string name, std::size_t kernel, std::size_t stride) {
		BasicLayer l = simple(LayerKind::maxpool, std::move(name));
		l.window = {kernel, kernel, stride, 0};
		return l;
	}

	static BasicLayer avgpool(std::string name, std::size_t kernel, std::size_t stride) {
		BasicLayer l = simple(LayerKind::avgpool, std::move(name));
		l.window = {kernel, kernel, stride, 0};
		return l;
	}

	friend bool operator==(const BasicLayer&, const BasicLayer&) = default;

private:
	static BasicLayer simple(LayerKind kind, std::string name) {
		BasicLayer l;
		l.kind = kind;
		l.name = std::move(name);
		return l;
	}
};

using Layer = BasicLayer<double>;

/// Activation and backpropagated activation gradient at one tap, per sample (batch axis kept).
template <typename T>
struct BasicTapCapture {
	std::string tap;
	BasicTensor<T> activation;
	BasicTensor<T> grad;
};

using TapCapture = BasicTapCapture<double>;

template <typename T>
struct BasicParamGrad {
	BasicTensor<T> weight;
	BasicTensor<T> bias;
};

/// Counts forward and backward passes; shared by a network and every copy derived from it.
struct PassCounter {
	std::atomic<std::uint64_t> forward{0};
	std::atomic<std::uint64_t> backward{0};

	void reset() {
		forward = 0;
		backward = 0;
	}
};

template <typename T>
struct ForwardCache {
	/// activations[0] is the input; activations[i + 1] is the output of layer i.
	std::vector<BasicTensor<T>> activations;
	/// Per maxpool layer, winner offsets; empty for other kinds.
	std::vector<std::vector<std::size_t>> argmax;

	const BasicTensor<T>& logits() const { return activations.back(); }
};

template <typename T>
struct LossResult {
	T loss = 0;
	/// dl/dlogits, the seed handed to backward.
	BasicTensor<T> seed;
};

template <typename T>
struct BackwardResult {
	std::vector<BasicParamGrad<T>> param_grads;
	std::vector<BasicTapCapture<T>> captures;
};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
template <typename T>
LossResult<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::size_t> labels) {
	if (logits.rank() != 2) throw ShapeError("cross_entropy expects (N, classes) logits");
	const std::size_t batch = logits.dim(0), classes = logits.dim(1);
	if (labels.size() != batch) {
		throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " + std::to_string(batch));
	}
	LossResult<T> r{T(0), BasicTensor<T>(logits.shape())};
	const T inv_batch = T(1) / static_cast<T>(batch);
	for (std::size_t n = 0; n < batch; ++n) {
		if (labels[n] >= classes) {
			throw RangeError("label " + std::to_string(labels[n]) + " out of range for " + std::to_string(classes) +
					" classes");
		}
		const T* z = logits.data().data() + n * classes;
		const T zmax = *std::max_element(z, z + classes);
		T denom = 0;
		for (std::size_t k = 0; k < classes; ++k) denom += std::exp(z[k] - zmax);
		const T log_denom = std::log(denom);
		r.loss += (log_denom + zmax - z[labels[n]]) * inv_batch;
		for (std::size_t k = 0; k < classes; ++k) {
			const T p = std::exp(z[k] - zmax - log_denom);
			r.seed[n * classes + k] = (p - (k == labels[n] ? T(1) : T(0))) * inv_batch;
		}
	}
	return r;
}

/**
 * A chain of layers mapping (N,C,H,W) images to (N,classes) logits.
 *
 * Tap positions sit between layers: position 0 is the network input (tap
 * name "input") and position i+1 is the output of layer i (tap name
 * "after:<layer name>"). Shapes are checked symbolically at construction.
 */
template <typename T>
class BasicNetwork {
public:
	using TensorT = BasicTensor<T>;
	using LayerT = BasicLayer<T>;

	BasicNetwork(Shape input_shape, std::vector<LayerT> layers) :
			input_shape_(std::move(input_shape)),
			layers_(std::move(layers)),
			counter_(std::make_shared<PassCounter>()) {
		infer_shapes();
	}

	const std::vector<LayerT>& layers() const { return layers_; }
	const LayerT& layer(std::size_t i) const { return layers_.at(i); }
	LayerT& layer(std::size_t i) { return layers_.at(i); }
	std::size_t layer_index(std::string_view name) const {
		for (std::size_t i = 0; i < layers_.size(); ++i) {
			if (layers_[i].name == name) return i;
		}
		throw RangeError("unknown layer '" + std::string(name) + "'");
	}

	/// Per-sample input shape (C, H, W).
	const Shape& input_shape() const { return input_shape_; }
	/// Per-sample shape at a tap position (no batch axis).
	const Shape& tap_shape(std::size_t position) const { return shapes_.at(position); }
	std::size_t num_classes() const { return shapes_.back()[0]; }

	std::size_t tap_count() const { return layers_.size() + 1; }

	std::string tap_name(std::size_t position) const {
		if (position == 0) return "input";
		return "after:" + layers_.at(position - 1).name;
	}

	std::vector<std::string> tap_names() const {
		std::vector<std::string> names;
		for (std::size_t p = 0; p < tap_count(); ++p) names.push_back(tap_name(p));
		return names;
	}

	std::size_t tap_position(std::string_view tap) const {
		if (tap == "input") return 0;
		if (tap.starts_with("after:")) {
			const std::string_view name = tap.substr(6);
			for (std::size_t i = 0; i < layers_.size(); ++i) {
				if (layers_[i].name == name) return i + 1;
			}
		}
		throw RangeError("unknown tap '" + std::string(tap) + "'");
	}

	PassCounter& counter() const { return *counter_; }

	/// Returns a network with layer inserted so that it becomes layer `position` (shares the pass counter).
	BasicNetwork with_layer_inserted(std::size_t position, LayerT layer) const {
		if (position > layers_.size()) throw RangeError("insertion position out of range");
		std::vector<LayerT> layers = layers_;
		layers.insert(layers.begin() + static_cast<std::ptrdiff_t>(position), std::move(layer));
		BasicNetwork copy(input_shape_, std::move(layers));
		copy.counter_ = counter_;
		return copy;
	}

	std::size_t parameter_count() const {
		std::size_t n = 0;
		for (const auto& l : layers_) {
			if (l.has_params()) n += l.weight.size() + l.bias.size();
		}
		return n;
	}

	/// All parameters flattened layer by layer (weight then bias).
	std::vector<T> parameters() const {
		std::vector<T> theta;
		theta.reserve(parameter_count());
		for (const auto& l : layers_) {
			if (!l.has_params()) continue;
			theta.insert(theta.end(), l.weight.values().begin(), l.weight.values().end());
			theta.insert(theta.end(), l.bias.values().begin(), l.bias.values().end());
		}
		return theta;
	}

	void set_parameters(std::span<const T> theta) {
		if (theta.size() != parameter_count()) {
			throw ShapeError("parameter vector length " + std::to_string(theta.size()) + " != " +
					std::to_string(parameter_count()));
		}
		std::size_t at = 0;
		for (auto& l : layers_) {
			if (!l.has_params()) continue;
			for (auto& v : l.weight.data()) v = theta[at++];
			for (auto& v : l.bias.data()) v = theta[at++];
		}
	}

	/// Copy evaluated at other parameters, sharing the pass counter.
	BasicNetwork with_parameters(std::span<const T> theta) const {
		BasicNetwork copy = *this;
		copy.set_parameters(theta);
		return copy;
	}

	/// He-uniform weights, zero biases.
	void initialize(std::uint64_t seed) {
		Rng rng(seed);
		for (auto& l : layers_) {
			if (!l.has_params()) continue;
			const std::size_t fan_in = l.weight.size() / l.weight.dim(0);
			const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
			for (auto& v : l.weight.data()) v = static_cast<T>(rng.uniform(-bound, bound));
			l.bias.fill(T(0));
		}
	}

	ForwardCache<T> forward(const TensorT& x) const {
		check_input(x);
		counter_->forward.fetch_add(1, std::memory_order_relaxed);
		ForwardCache<T> cache;
		cache.activations.reserve(layers_.size() + 1);
		cache.activations.push_back(x);
		cache.argmax.resize(layers_.size());
		for (std::size_t i = 0; i < layers_.size(); ++i) {
			const LayerT& l = layers_[i];
			const TensorT& in = cache.activations.back();
			TensorT out;
			switch (l.kind) {
			case LayerKind::conv2d: out = conv2d_forward(in, l.weight, l.bias, l.window); break;
			case LayerKind::relu: out = relu_forward(in); break;
			case LayerKind::maxpool: out = maxpool_forward(in, l.window, cache.argmax[i]); break;
			case LayerKind::avgpool: out = avgpool_forward(in, l.window); break;
			case LayerKind::global_avg_pool: out = global_avg_pool_forward(in); break;
			case LayerKind::linear: out = linear_forward(in, l.weight, l.bias); break;
			case LayerKind::flatten: out = in.reshaped({in.dim(0), in.size() / in.dim(0)}); break;
			}
			cache.activations.push_back(std::move(out));
		}
		return cache;
	}

	std::pair<T, ForwardCache<T>> forward(const TensorT& x, std::span<const std::size_t> labels) const {
		ForwardCache<T> cache = forward(x);
		const T loss = cross_entropy(cache.logits(), labels).loss;
		return {loss, std::move(cache)};
	}

	/**
	 * Backpropagates `seed` (dl/dlogits) through the cached pass.
	 *
	 * Returns dl/dtheta for every parametrized layer (empty tensors for the
	 * others) and, for each requested tap, the cached activation with its
	 * gradient. Taps never alter the computation.
	 */
	BackwardResult<T> backward(const ForwardCache<T>& cache, const TensorT& seed,
			std::span<const std::string> taps = {}) const {
		if (cache.activations.size() != layers_.size() + 1) throw ShapeError("cache does not match this network");
		require_same_shape(seed, cache.logits(), "backward seed");
		std::vector<std::size_t> positions;
		for (const auto& t : taps) positions.push_back(tap_position(t));
		counter_->backward.fetch_add(1, std::memory_order_relaxed);

		BackwardResult<T> result;
		result.param_grads.resize(layers_.size());
		result.captures.resize(taps.size());
		auto capture = [&](std::size_t position, const TensorT& grad) {
			for (std::size_t k = 0; k < positions.size(); ++k) {
				if (positions[k] == position) {
					result.captures[k] = {taps[k], cache.activations[position], grad};
				}
			}
		};

		TensorT grad = seed;
		capture(layers_.size(), grad);
		for (std::size_t i = layers_.size(); i-- > 0;) {
			const LayerT& l = layers_[i];
			const TensorT& in = cache.activations[i];
			switch (l.kind) {
			case LayerKind::conv2d: {
				ConvGrads<T> g = conv2d_backward(in, l.weight, grad, l.window);
				result.param_grads[i] = {std::move(g.weight), std::move(g.bias)};
				grad = std::move(g.input);
				break;
			}
			case LayerKind::linear: {
				LinearGrads<T> g = linear_backward(in, l.weight, grad);
				result.param_grads[i] = {std::move(g.weight), std::move(g.bias)};
				grad = std::move(g.input);
				break;
			}
			case LayerKind::relu: grad = relu_backward(in, grad); break;
			case LayerKind::maxpool: grad = maxpool_backward(in.shape(), cache.argmax[i], grad); break;
			case LayerKind::avgpool: grad = avgpool_backward(in.shape(), l.window, grad); break;
			case LayerKind::global_avg_pool: grad = global_avg_pool_backward(in.shape(), grad); break;
			case LayerKind::flatten: grad = grad.reshaped(in.shape()); break;
			}
			capture(i, grad);
		}
		return result;
	}

	/// Flattens per-layer gradients in the order of parameters().
	std::vector<T> flatten_grads(const std::vector<BasicParamGrad<T>>& grads) const {
		std::vector<T> flat;
		flat.reserve(parameter_count());
		for (std::size_t i = 0; i < layers_.size(); ++i) {
			if (!layers_[i].has_params()) continue;
			flat.insert(flat.end(), grads[i].weight.values().begin(), grads[i].weight.values().end());
			flat.insert(flat.end(), grads[i].bias.values().begin(), grads[i].bias.values().end());
		}
		return flat;
	}

	/// Loss and flat dl/dtheta; one forward and one backward pass.
	std::pair<T, std::vector<T>> loss_and_gradient(const TensorT& x, std::span<const std::size_t> labels) const {
		ForwardCache<T> cache = forward(x);
		LossResult<T> lr = cross_entropy(cache.logits(), labels);
		BackwardResult<T> br = backward(cache, lr.seed);
		return {lr.loss, flatten_grads(br.param_grads)};
	}

	std::vector<std::size_t> predict(const TensorT& x) const { return argmax_rows(forward(x).logits()); }

	static std::vector<std::size_t> argmax_rows(const TensorT& logits) {
		std::vector<std::size_t> out(logits.dim(0));
		const std::size_t k = logits.dim(1);
		for (std::size_t n = 0; n < out.size(); ++n) {
			const T* z = logits.data().data() + n * k;
			out[n] = static_cast<std::size_t>(std::max_element(z, z + k) - z);
		}
		return out;
	}

private:
	void check_input(const TensorT& x) const {
		if (x.rank() != 4 || x.dim(1) != input_shape_[0] || x.dim(2) != input_shape_[1] ||
				x.dim(3) != input_shape_[2]) {
			throw ShapeError("input " + shape_string(x.shape()) + " does not match network input (N," +
					shape_string(input_shape_).substr(1));
		}
	}

	void infer_shapes() {
		if (input_shape_.size() != 3) throw ShapeError("network input shape must be (C,H,W)");
		std::set<std::string> names;
		shapes_.clear();
		shapes_.push_back(input_shape_);
		for (const auto& l : layers_) {
			if (l.name.empty() || !names.insert(l.name).second) {
				throw ShapeError("layer names must be unique and nonempty ('" + l.name + "')");
			}
			const Shape& in = shapes_.back();
			const auto need4 = [&] {
				if (in.size() != 3) {
					throw ShapeError("layer '" + l.name + "' (" + std::string(layer_kind_name(l.kind)) +
							") needs a (C,H,W) input, got " + shape_string(in));
				}
			};
			Shape out;
			switch (l.kind) {
			case LayerKind::conv2d: {
				need4();
				if (l.window.stride < 1) throw ShapeError("conv '" + l.name + "' stride must be >= 1");
				if (in[0] != l.in_channels || l.weight.shape() != Shape{l.out_channels, l.in_channels,
								l.window.kernel_h, l.window.kernel_w} ||
						l.bias.shape() != Shape{l.out_channels}) {
					throw ShapeError("conv '" + l.name + "' weight " + shape_string(l.weight.shape()) +
							" inconsistent with input " + shape_string(in));
				}
				const auto [oh, ow] = window_output_hw(in[1], in[2], l.window);
				out = {l.out_channels, oh, ow};
				break;
			}
			case LayerKind::maxpool:
			case LayerKind::avgpool: {
				need4();
				if (l.window.padding != 0) throw ShapeError("pool '" + l.name + "' does not support padding");
				const auto [oh, ow] = window_output_hw(in[1], in[2], l.window);
				out = {in[0], oh, ow};
				break;
			}
			case LayerKind::global_avg_pool: need4(); out = {in[0]}; break;
			case LayerKind::relu: out = in; break;
			case LayerKind::flatten: out = {shape_size(in)}; break;
			case LayerKind::linear:
				if (in.size() != 1 || in[0] != l.in_channels ||
						l.weight.shape() != Shape{l.out_channels, l.in_channels} || l.bias.shape() != Shape{l.out_channels}) {
					throw ShapeError("linear '" + l.name + "' expects a flat input of " + std::to_string(l.in_channels) +
							", got " + shape_string(in));
				}
				out = {l.out_channels};
				break;
			}
			shapes_.push_back(std::move(out));
		}
		if (shapes_.back().size() != 1) throw ShapeError("network must end in a flat (classes) output");
	}

	Shape input_shape_;
	std::vector<LayerT> layers_;
	std::vector<Shape> shapes_;
	std::shared_ptr<PassCounter> counter_;
};

using Network = BasicNetwork<double>;

/**
 * Conv weight gradient assembled from captures: dl/dW = (dl/dX'')^T * im2row(x'),
 * summed over the batch and reshaped to (C'', C', kernel_h, kernel_w).
 *
 * `input` is the capture at the conv input (x'), `out_grad` the gradient at
 * the conv output (dl/dX'').
 */
template <typename T>
BasicTensor<T> weight_grad_from_taps(const BasicTapCapture<T>& input, const BasicTensor<T>& out_grad,
		const WindowGeometry& g) {
	const BasicTensor<T>& x = input.activation;
	if (x.rank() != 4 || out_grad.rank() != 4 || x.dim(0) != out_grad.dim(0)) {
		throw ShapeError("weight_grad_from_taps: incompatible capture " + shape_string(x.shape()) + " and gradient " +
				shape_string(out_grad.shape()));
	}
	const auto [oh, ow] = window_output_hw(x.dim(2), x.dim(3), g);
	if (out_grad.dim(2) != oh || out_grad.dim(3) != ow) {
		throw ShapeError("weight_grad_from_taps: gradient " + shape_string(out_grad.shape()) +
				" does not match the window geometry applied to " + shape_string(x.shape()));
	}
	const std::size_t out_c = out_grad.dim(1), positions = oh * ow;
	BasicTensor<T> total({out_c, x.dim(1) * g.kernel_h * g.kernel_w});
	for (std::size_t n = 0; n < x.dim(0); ++n) {
		BasicTensor<T> dy({positions, out_c});
		for (std::size_t k = 0; k < out_c; ++k) {
			for (std::size_t p = 0; p < positions; ++p) dy[p * out_c + k] = out_grad[(n * out_c + k) * positions + p];
		}
		total = total + matmul(transpose(dy), im2row(x, g, n));
	}
	return total.reshaped({out_c, x.dim(1), g.kernel_h, g.kernel_w});
}

/// Small CNN used by the CLI and tests: two 3x3 conv/pool blocks, a 1x1 conv, global average pooling, linear head.
inline Network make_toy_cnn(std::size_t channels, std::size_t size, std::size_t classes, std::size_t width = 8) {
	return Network({channels, size, size},
			{
					Layer::conv2d("conv1", channels, width, 3, 1, 1),
					Layer::relu("relu1"),
					Layer::maxpool("pool1", 2, 2),
					Layer::conv2d("conv2", width, 2 * width, 3, 1, 1),
					Layer::relu("relu2"),
					Layer::maxpool("pool2", 2, 2),
					Layer::conv2d("conv3", 2 * width, 2 * width, 1),
					Layer::relu("relu3"),
					Layer::global_avg_pool("gap"),
					Layer::linear("fc", 2 * width, classes),
			});
}

} // namespace normgrad

#endif // NORMGRAD_NETWORK_HPP_
