#ifndef NORMGRAD_SALIENCY_HPP_
#define NORMGRAD_SALIENCY_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "network.hpp"

namespace normgrad {

enum class Method { normgrad0, normgrad0_general, normgrad1, normgrad1_adv, gradcam };

inline std::string_view method_name(Method m) {
	switch (m) {
	case Method::normgrad0: return "normgrad0";
	case Method::normgrad0_general: return "normgrad0-general";
	case Method::normgrad1: return "normgrad1";
	case Method::normgrad1_adv: return "normgrad1-adv";
	case Method::gradcam: return "gradcam";
	}
	return "unknown";
}

inline std::optional<Method> parse_method(std::string_view s) {
	for (Method m : {Method::normgrad0, Method::normgrad0_general, Method::normgrad1, Method::normgrad1_adv,
				 Method::gradcam}) {
		if (method_name(m) == s) return m;
	}
	return std::nullopt;
}

/// Nonnegative per-sample importance maps, values shaped (N, H, W).
template <typename T>
struct BasicSaliencyMap {
	BasicTensor<T> values;
	std::string tap;
	Method method = Method::normgrad0;
	std::map<std::string, double> meta;

	std::size_t batch() const { return values.dim(0); }
	std::size_t height() const { return values.dim(1); }
	std::size_t width() const { return values.dim(2); }

	/// Map of sample n as an (H, W) tensor.
	BasicTensor<T> sample(std::size_t n) const {
		return batch_slice(values, n).reshaped({height(), width()});
	}
};

using SaliencyMap = BasicSaliencyMap<double>;

namespace detail {

template <typename T>
void require_spatial(const BasicTensor<T>& t, const char* what) {
	if (t.rank() != 4) {
		throw ShapeError(std::string(what) + ": expected a spatial (N,C,H,W) tensor, got " + shape_string(t.shape()));
	}
}

/// Euclidean norm over channels at every (n, v, u).
template <typename T>
BasicTensor<T> channel_norms(const BasicTensor<T>& t) {
	const std::size_t batch = t.dim(0), channels = t.dim(1), area = t.dim(2) * t.dim(3);
	BasicTensor<T> norms({batch, t.dim(2), t.dim(3)});
	for (std::size_t n = 0; n < batch; ++n) {
		for (std::size_t i = 0; i < area; ++i) {
			T acc = 0;
			for (std::size_t c = 0; c < channels; ++c) {
				const T v = t[(n * channels + c) * area + i];
				acc += v * v;
			}
			norms[n * area + i] = std::sqrt(acc);
		}
	}
	return norms;
}

} // namespace detail

/**
 * Order-0 NormGrad at a 1x1 stride-1 convolution.
 *
 * m_u = ||x'_u|| * ||g_u||, the Frobenius norm of the per-location outer
 * product g_u x'_u^T whose spatial sum is the layer's weight gradient.
 * `conv_input` is x' (N,C',H,W), `conv_out_grad` is dl/dx'' (N,C'',H,W).
 */
template <typename T>
BasicSaliencyMap<T> normgrad_1x1(const BasicTensor<T>& conv_input, const BasicTensor<T>& conv_out_grad,
		std::string tap = {}) {
	detail::require_spatial(conv_input, "normgrad_1x1");
	detail::require_spatial(conv_out_grad, "normgrad_1x1");
	if (conv_input.dim(0) != conv_out_grad.dim(0) || conv_input.dim(2) != conv_out_grad.dim(2) ||
			conv_input.dim(3) != conv_out_grad.dim(3)) {
		throw ShapeError("normgrad_1x1: activation " + shape_string(conv_input.shape()) + " and gradient " +
				shape_string(conv_out_grad.shape()) + " differ in batch or spatial extent");
	}
	BasicSaliencyMap<T> map{detail::channel_norms(conv_input) * detail::channel_norms(conv_out_grad), std::move(tap),
			Method::normgrad0, {}};
	return map;
}

/// normgrad_1x1 from the captures at a 1x1 conv's input and output taps.
template <typename T>
BasicSaliencyMap<T> normgrad_1x1(const BasicTapCapture<T>& conv_input, const BasicTapCapture<T>& conv_output) {
	return normgrad_1x1(conv_input.activation, conv_output.grad, conv_input.tap);
}

/// Order-0 NormGrad at an arbitrary tap via an imaginary identity 1x1 conv: m_u = ||x''_u|| * ||g_u||.
template <typename T>
BasicSaliencyMap<T> normgrad_identity_trick(const BasicTapCapture<T>& capture) {
	require_same_shape(capture.activation, capture.grad, "normgrad_identity_trick");
	return normgrad_1x1(capture.activation, capture.grad, capture.tap);
}

/**
 * Order-0 NormGrad for a general k x k convolution, at input resolution.
 *
 * Each output location r contributes ||row r of dl/dX''|| * ||row r of
 * im2row(x')|| to every in-image pixel of its receptive field. Sums are not
 * normalized by coverage, so border pixels receive fewer contributions.
 */
template <typename T>
BasicSaliencyMap<T> normgrad_general(const BasicTensor<T>& conv_input, const BasicTensor<T>& conv_out_grad,
		const WindowGeometry& g, std::string tap = {}) {
	detail::require_spatial(conv_input, "normgrad_general");
	detail::require_spatial(conv_out_grad, "normgrad_general");
	const std::size_t batch = conv_input.dim(0), h = conv_input.dim(2), w = conv_input.dim(3);
	const auto [oh, ow] = window_output_hw(h, w, g);
	if (conv_out_grad.dim(0) != batch || conv_out_grad.dim(2) != oh || conv_out_grad.dim(3) != ow) {
		throw ShapeError("normgrad_general: gradient " + shape_string(conv_out_grad.shape()) +
				" does not match the window geometry applied to " + shape_string(conv_input.shape()));
	}
	const BasicTensor<T> grad_norms = detail::channel_norms(conv_out_grad);
	const std::size_t cols = conv_input.dim(1) * g.kernel_h * g.kernel_w;
	BasicSaliencyMap<T> map{BasicTensor<T>({batch, h, w}), std::move(tap), Method::normgrad0_general, {}};
	const auto pad = static_cast<std::ptrdiff_t>(g.padding);
	for (std::size_t n = 0; n < batch; ++n) {
		const BasicTensor<T> patches = im2row(conv_input, g, n);
		for (std::size_t oy = 0; oy < oh; ++oy) {
			for (std::size_t ox = 0; ox < ow; ++ox) {
				const std::size_t r = oy * ow + ox;
				T patch_sq = 0;
				for (std::size_t j = 0; j < cols; ++j) patch_sq += patches[r * cols + j] * patches[r * cols + j];
				const T contribution = grad_norms[n * oh * ow + r] * std::sqrt(patch_sq);
				for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
					const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
					if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
					for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
						const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
						if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
						map.values[(n * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += contribution;
					}
				}
			}
		}
	}
	return map;
}

/// Grad-CAM in tap notation: m_u = max(gbar . x''_u, 0), gbar the spatial mean of the tap gradient.
template <typename T>
BasicSaliencyMap<T> gradcam(const BasicTapCapture<T>& capture) {
	require_same_shape(capture.activation, capture.grad, "gradcam");
	detail::require_spatial(capture.activation, "gradcam");
	const BasicTensor<T>& x = capture.activation;
	const BasicTensor<T>& g = capture.grad;
	const std::size_t batch = x.dim(0), channels = x.dim(1), area = x.dim(2) * x.dim(3);
	BasicSaliencyMap<T> map{BasicTensor<T>({batch, x.dim(2), x.dim(3)}), capture.tap, Method::gradcam, {}};
	std::vector<T> mean(channels);
	for (std::size_t n = 0; n < batch; ++n) {
		for (std::size_t c = 0; c < channels; ++c) {
			T acc = 0;
			for (std::size_t i = 0; i < area; ++i) acc += g[(n * channels + c) * area + i];
			mean[c] = acc / static_cast<T>(area);
		}
		for (std::size_t i = 0; i < area; ++i) {
			T acc = 0;
			for (std::size_t c = 0; c < channels; ++c) acc += mean[c] * x[(n * channels + c) * area + i];
			map.values[n * area + i] = std::max(acc, T(0));
		}
	}
	return map;
}

/// max(cos(a, b), 0); zero when either vector vanishes.
template <typename T>
T cosine_plus(const BasicTensor<T>& a, const BasicTensor<T>& b) {
	const T na = frobenius_norm(a), nb = frobenius_norm(b);
	if (na == T(0) || nb == T(0)) return T(0);
	return std::max(dot(a, b) / (na * nb), T(0));
}

/// A forward pass whose backward seed targets a chosen class instead of the true labels.
template <typename T>
struct TargetedPass {
	T loss = 0;
	ForwardCache<T> cache;
	BasicTensor<T> seed;
};

template <typename T>
TargetedPass<T> class_target_select(const BasicNetwork<T>& net, const BasicTensor<T>& x, std::size_t class_index) {
	if (net.num_classes() < 2) throw RangeError("class targeting needs at least 2 classes");
	if (class_index >= net.num_classes()) {
		throw RangeError("class " + std::to_string(class_index) + " out of range for " +
				std::to_string(net.num_classes()) + " classes");
	}
	TargetedPass<T> pass{T(0), net.forward(x), {}};
	const std::vector<std::size_t> targets(x.dim(0), class_index);
	LossResult<T> lr = cross_entropy(pass.cache.logits(), targets);
	pass.loss = lr.loss;
	pass.seed = std::move(lr.seed);
	return pass;
}

} // namespace normgrad

#endif // NORMGRAD_SALIENCY_HPP_
