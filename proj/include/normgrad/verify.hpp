#ifndef NORMGRAD_VERIFY_HPP_
#define NORMGRAD_VERIFY_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "order1.hpp"
#include "saliency.hpp"

namespace normgrad::verify {

/// One measured property: pass iff error < tolerance (or >= for "ratio" checks).
struct Check {
	std::string suite;
	std::string property;
	double measured = 0;
	double tolerance = 0;
	bool at_least = false;
	bool passed = false;
};

inline Check make_check(std::string suite, std::string property, double measured, double tolerance, bool at_least = false) {
	const bool ok = std::isfinite(measured) && (at_least ? measured >= tolerance : measured < tolerance);
	return {std::move(suite), std::move(property), measured, tolerance, at_least, ok};
}

inline const std::vector<std::string>& suite_names() {
	static const std::vector<std::string> names{"decomposition", "im2row", "gradient", "hvp", "gradcam", "identity"};
	return names;
}

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
	Tensor t(std::move(shape));
	for (auto& v : t.data()) v = rng.uniform(lo, hi);
	return t;
}

inline double rel_error(std::span<const double> a, std::span<const double> b) {
	double num = 0, den = 0;
	for (std::size_t i = 0; i < a.size(); ++i) {
		num = std::max(num, std::abs(a[i] - b[i]));
		den = std::max(den, std::abs(b[i]));
	}
	return den > 0 ? num / den : num;
}

// Six nested loops, no lowering.
inline Tensor direct_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
	const std::size_t n_ = x.dim(0), c_ = x.dim(1), h = x.dim(2), wd = x.dim(3);
	const std::size_t k_ = w.dim(0), kh = w.dim(2), kw = w.dim(3);
	const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
	Tensor y({n_, k_, oh, ow});
	for (std::size_t n = 0; n < n_; ++n)
		for (std::size_t k = 0; k < k_; ++k)
			for (std::size_t oy = 0; oy < oh; ++oy)
				for (std::size_t ox = 0; ox < ow; ++ox) {
					double acc = 0;
					for (std::size_t c = 0; c < c_; ++c)
						for (std::size_t ky = 0; ky < kh; ++ky)
							for (std::size_t kx = 0; kx < kw; ++kx) {
								const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
								const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
								if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
								acc += w(k, c, ky, kx) * x(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
							}
					y(n, k, oy, ox) = acc;
				}
	return y;
}

inline Network small_cnn(std::uint64_t seed) {
	Network net({3, 8, 8}, {
			Layer::conv2d("conv1", 3, 4, 3, 1, 1),
			Layer::relu("relu1"),
			Layer::conv2d("conv2", 4, 5, 1),
			Layer::relu("relu2"),
			Layer::conv2d("conv3", 5, 4, 3, 1, 1),
			Layer::relu("relu3"),
			Layer::global_avg_pool("gap"),
			Layer::linear("fc", 4, 3),
	});
	net.initialize(seed);
	// Zero biases leave pre-activations exactly on ReLU kinks wherever a layer's input vanishes.
	Rng rng(seed + 100);
	for (std::size_t i = 0; i < net.layers().size(); ++i) {
		if (!net.layer(i).has_params()) continue;
		for (auto& b : net.layer(i).bias.data()) b = rng.uniform(-0.1, 0.1);
	}
	return net;
}

inline std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
	std::vector<std::size_t> y(n);
	for (auto& v : y) v = rng.index(classes);
	return y;
}

} // namespace detail

/// Per-location outer products summed over space against the 1x1 conv weight gradient.
inline std::vector<Check> decomposition(std::uint64_t seed) {
	double worst = 0;
	for (std::uint64_t s = 0; s < 5; ++s) {
		Rng rng(seed * 1000 + s);
		const Network net = detail::small_cnn(seed * 1000 + s);
		const Tensor x = detail::random_tensor({2, 3, 8, 8}, rng);
		const auto cache = net.forward(x);
		const auto lr = cross_entropy(cache.logits(), detail::random_labels(2, 3, rng));
		const std::vector<std::string> taps{"after:relu1", "after:conv2"};
		const auto br = net.backward(cache, lr.seed, taps);
		const Tensor& xin = br.captures[0].activation;
		const Tensor& g = br.captures[1].grad;
		Tensor sum({g.dim(1), xin.dim(1)});
		for (std::size_t n = 0; n < xin.dim(0); ++n)
			for (std::size_t v = 0; v < xin.dim(2); ++v)
				for (std::size_t u = 0; u < xin.dim(3); ++u)
					for (std::size_t i = 0; i < g.dim(1); ++i)
						for (std::size_t j = 0; j < xin.dim(1); ++j) sum[i * xin.dim(1) + j] += g(n, i, v, u) * xin(n, j, v, u);
		worst = std::max(worst, detail::rel_error(sum.values(), br.param_grads[2].weight.values()));
	}
	return {make_check("decomposition", "sum_u g_u x_u^T == dW (1x1 conv)", worst, 1e-12)};
}

/// im2row(x) W^T against direct convolution, plus weight gradients assembled from taps.
inline std::vector<Check> im2row_equivalence(std::uint64_t seed) {
	Rng rng(seed);
	double conv_err = 0;
	for (const WindowGeometry g : {WindowGeometry{3, 3, 1, 1}, WindowGeometry{3, 3, 2, 0}, WindowGeometry{2, 2, 1, 0}}) {
		const Tensor x = detail::random_tensor({1, 3, 7, 6}, rng);
		const Tensor w = detail::random_tensor({4, 3, g.kernel_h, g.kernel_w}, rng);
		const Tensor lowered = matmul(im2row(x, g), transpose(w.reshaped({4, w.size() / 4})));
		const Tensor direct = detail::direct_conv(x, w, g.stride, g.padding);
		const std::size_t positions = direct.dim(2) * direct.dim(3);
		Tensor relaid({positions, 4});
		for (std::size_t k = 0; k < 4; ++k)
			for (std::size_t p = 0; p < positions; ++p) relaid[p * 4 + k] = direct[k * positions + p];
		conv_err = std::max(conv_err, detail::rel_error(lowered.values(), relaid.values()));
	}
	const Network net = detail::small_cnn(seed);
	const Tensor x = detail::random_tensor({2, 3, 8, 8}, rng);
	const auto cache = net.forward(x);
	const auto lr = cross_entropy(cache.logits(), detail::random_labels(2, 3, rng));
	const std::vector<std::string> taps = net.tap_names();
	const auto br = net.backward(cache, lr.seed, taps);
	const Tensor assembled = weight_grad_from_taps(br.captures[0], br.captures[1].grad, net.layer(0).window);
	return {make_check("im2row", "im2row(x) W^T == direct conv", conv_err, 1e-12),
			make_check("im2row", "(dl/dX'')^T im2row(x) == dW (3x3 conv)",
					detail::rel_error(assembled.values(), br.param_grads[0].weight.values()), 1e-10)};
}

/// Backpropagated parameter gradients against central differences of the loss.
///
/// A coordinate whose perturbation flips any ReLU switch lies on a kink; central differences are
/// meaningless there, so it is excluded, and more than 10% excluded fails.
inline std::vector<Check> gradient(std::uint64_t seed) {
	Rng rng(seed);
	const Network net = detail::small_cnn(seed);
	const Tensor x = detail::random_tensor({2, 3, 8, 8}, rng);
	const auto y = detail::random_labels(2, 3, rng);
	const auto analytic = net.loss_and_gradient(x, y).second;
	// small_cnn has no pooling, so ReLU inputs carry every switch.
	auto switches = [&](const Network& n) {
		const auto cache = n.forward(x);
		std::vector<bool> on;
		for (std::size_t i = 0; i < n.layers().size(); ++i)
			if (n.layer(i).kind == LayerKind::relu)
				for (double v : cache.activations[i].values()) on.push_back(v > 0);
		return std::make_pair(cross_entropy(cache.logits(), y).loss, on);
	};
	const auto base = switches(net).second;
	std::vector<double> theta = net.parameters(), kept_analytic, kept_numeric;
	const double step = 1e-5;
	std::size_t excluded = 0;
	for (std::size_t i = 0; i < theta.size(); ++i) {
		const double keep = theta[i];
		theta[i] = keep + step;
		const auto [lp, sp] = switches(net.with_parameters(theta));
		theta[i] = keep - step;
		const auto [lm, sm] = switches(net.with_parameters(theta));
		theta[i] = keep;
		if (sp != base || sm != base) {
			++excluded;
			continue;
		}
		kept_analytic.push_back(analytic[i]);
		kept_numeric.push_back((lp - lm) / (2 * step));
	}
	return {make_check("gradient", "backprop == central differences (step 1e-5)",
					detail::rel_error(kept_analytic, kept_numeric), 1e-6),
			make_check("gradient", "fraction of coordinates straddling a ReLU switch",
					static_cast<double>(excluded) / static_cast<double>(theta.size()), 0.1)};
}

/// Central-difference HVP: exact on quadratics, second order on a small MLP.
inline std::vector<Check> hvp(std::uint64_t seed) {
	Rng rng(seed);
	constexpr std::size_t n = 5;
	std::vector<double> a(n * n);
	for (std::size_t i = 0; i < n; ++i)
		for (std::size_t j = 0; j <= i; ++j) a[i * n + j] = a[j * n + i] = rng.uniform(-1, 1);
	auto quad_grad = [&](std::span<const double> t) {
		std::vector<double> out(n);
		for (std::size_t i = 0; i < n; ++i)
			for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j] * t[j];
		return out;
	};
	std::vector<double> theta(n), v(n);
	for (auto& e : theta) e = rng.uniform(-1, 1);
	for (auto& e : v) e = rng.uniform(-1, 1);
	const std::vector<double> av = quad_grad(v);
	double quad_err = 0;
	for (double h : {1e-1, 1e-2, 1e-3, 1e-4}) {
		quad_err = std::max(quad_err, detail::rel_error(hvp_central<double>(quad_grad, theta, v, h), av));
	}

	// No ReLU: a kink crossed by theta +/- h v breaks the O(h^2) rate for some seeds. Softmax keeps the loss non-quadratic.
	Network mlp({2, 2, 2}, {Layer::flatten("f"), Layer::linear("l1", 8, 6), Layer::linear("l2", 6, 3)});
	mlp.initialize(seed);
	const Tensor x = detail::random_tensor({4, 2, 2, 2}, rng);
	const auto y = detail::random_labels(4, 3, rng);
	const std::size_t p = mlp.parameter_count();
	std::vector<double> base = mlp.parameters(), dir(p);
	for (auto& e : dir) e = rng.uniform(-1, 1);
	// Dense Hessian column by column from differences of exact gradients.
	std::vector<double> hv(p);
	const double fine = 1e-6;
	for (std::size_t j = 0; j < p; ++j) {
		std::vector<double> plus = base, minus = base;
		plus[j] += fine;
		minus[j] -= fine;
		const auto gp = mlp.with_parameters(plus).loss_and_gradient(x, y).second;
		const auto gm = mlp.with_parameters(minus).loss_and_gradient(x, y).second;
		for (std::size_t i = 0; i < p; ++i) hv[i] += (gp[i] - gm[i]) / (2 * fine) * dir[j];
	}
	const double e1 = detail::rel_error(hvp_central<double>(mlp, x, y, dir, 1e-2), hv);
	const double e2 = detail::rel_error(hvp_central<double>(mlp, x, y, dir, 5e-3), hv);
	return {make_check("hvp", "quadratic: |hvp - Av| over h in [1e-4, 1e-1]", quad_err, 1e-10),
			make_check("hvp", "mlp: |hvp - Hv| at h = 5e-3", e2, 1e-3),
			make_check("hvp", "mlp: error ratio when h halves", e1 / e2, 2.0, true)};
}

/// Grad-CAM equals cos+(g_u, x_u) times order-0 NormGrad where the tap gradient is spatially uniform.
inline std::vector<Check> gradcam_relation(std::uint64_t seed) {
	Rng rng(seed);
	Network net = make_toy_cnn(3, 16, 3, 4);
	net.initialize(seed);
	const Tensor x = detail::random_tensor({2, 3, 16, 16}, rng, 0, 1);
	const auto cache = net.forward(x);
	const auto lr = cross_entropy(cache.logits(), detail::random_labels(2, 3, rng));
	const std::vector<std::string> taps{"after:relu3"};
	const auto br = net.backward(cache, lr.seed, taps);
	const TapCapture& cap = br.captures[0];
	const SaliencyMap cam = gradcam(cap);
	const SaliencyMap ng = normgrad_identity_trick(cap);
	double worst = 0;
	for (std::size_t n = 0; n < cam.batch(); ++n)
		for (std::size_t v = 0; v < cam.height(); ++v)
			for (std::size_t u = 0; u < cam.width(); ++u) {
				const double c = cosine_plus(spatial_column(cap.grad, n, v, u), spatial_column(cap.activation, n, v, u));
				const std::size_t i = (n * cam.height() + v) * cam.width() + u;
				worst = std::max(worst, std::abs(cam.values[i] - c * ng.values[i]));
			}
	return {make_check("gradcam", "gradcam == cos+(g, x) * normgrad at pool input", worst, 1e-10)};
}

/// Identity trick against a literally inserted identity 1x1 conv.
inline std::vector<Check> identity(std::uint64_t seed) {
	Rng rng(seed);
	Network net = make_toy_cnn(3, 16, 3, 4);
	net.initialize(seed);
	const Tensor x = detail::random_tensor({1, 3, 16, 16}, rng, 0, 1);
	const auto y = detail::random_labels(1, 3, rng);
	double worst = 0;
	for (const std::string tap : {"after:relu1", "after:relu2", "after:relu3"}) {
		const std::size_t pos = net.tap_position(tap);
		const Network lit = net.with_layer_inserted(pos, Layer::identity_conv("identity", net.tap_shape(pos)[0]));
		const std::vector<std::string> lit_taps{tap, "after:identity"}, taps{tap};
		const auto lc = lit.forward(x);
		const auto lb = lit.backward(lc, cross_entropy(lc.logits(), y).seed, lit_taps);
		const auto c = net.forward(x);
		const auto b = net.backward(c, cross_entropy(c.logits(), y).seed, taps);
		worst = std::max(worst, detail::rel_error(normgrad_identity_trick(b.captures[0]).values.values(),
										normgrad_1x1(lb.captures[0], lb.captures[1]).values.values()));
	}
	return {make_check("identity", "identity trick == literal identity 1x1 conv (3 depths)", worst, 1e-12)};
}

inline std::vector<Check> run_suite(const std::string& name, std::uint64_t seed) {
	if (name == "decomposition") return decomposition(seed);
	if (name == "im2row") return im2row_equivalence(seed);
	if (name == "gradient") return gradient(seed);
	if (name == "hvp") return hvp(seed);
	if (name == "gradcam") return gradcam_relation(seed);
	if (name == "identity") return identity(seed);
	throw RangeError("unknown verification suite '" + name + "'");
}

} // namespace normgrad::verify

#endif // NORMGRAD_VERIFY_HPP_
