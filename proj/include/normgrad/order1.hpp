#ifndef NORMGRAD_ORDER1_HPP_
#define NORMGRAD_ORDER1_HPP_

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saliency.hpp"

namespace normgrad {

enum class Order1Mode { training, adversarial };
enum class Order1Form { factorized, exact };

/// How the finite-difference step h is produced from the direction gradient.
struct FdStepPolicy {
	/// Fixed h, overriding the norm rule when set.
	std::optional<double> fixed;
	/// Norm rule: h = scale / ||grad_{theta'} l(theta', x)||_2.
	double scale = 0.5;

	template <typename T>
	double step(std::span<const T> direction) const {
		if (fixed) {
			if (!(*fixed > 0.0) || !std::isfinite(*fixed)) throw NumericError("fixed fd step must be positive and finite");
			return *fixed;
		}
		double sq = 0.0;
		for (T v : direction) sq += static_cast<double>(v) * static_cast<double>(v);
		const double norm = std::sqrt(sq);
		if (!(norm > 0.0)) {
			throw NumericError("fd step rule h = " + std::to_string(scale) +
					" / ||grad|| is undefined: the gradient at theta' is zero; pass a fixed fd step instead");
		}
		const double h = scale / norm;
		if (!std::isfinite(h)) throw NumericError("fd step rule produced a non-finite h; pass a fixed fd step instead");
		return h;
	}
};

struct Order1Config {
	/// Inner SGD learning rate.
	double epsilon = 0.0005;
	FdStepPolicy fd_step;
	Order1Mode mode = Order1Mode::training;
	Order1Form form = Order1Form::factorized;

	void validate() const {
		if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw NumericError("order-1 epsilon must be positive and finite");
		if (!fd_step.fixed && !(fd_step.scale > 0.0)) throw NumericError("fd step scale must be positive");
	}
};

/// theta' = theta - eps * grad (training) or theta + eps * grad (adversarial).
template <typename T>
std::vector<T> inner_step(std::span<const T> theta, std::span<const T> grad, double epsilon, Order1Mode mode) {
	if (theta.size() != grad.size()) throw ShapeError("inner_step: parameter and gradient lengths differ");
	const T signed_eps = static_cast<T>(mode == Order1Mode::training ? -epsilon : epsilon);
	std::vector<T> out(theta.begin(), theta.end());
	for (std::size_t i = 0; i < out.size(); ++i) out[i] += signed_eps * grad[i];
	return out;
}

/// One SGD step on the network's loss at (x, y); one forward/backward pass.
template <typename T>
std::vector<T> inner_step(const BasicNetwork<T>& net, const BasicTensor<T>& x, std::span<const std::size_t> labels,
		double epsilon, Order1Mode mode) {
	if (epsilon < 0.0) throw NumericError("inner_step epsilon must be nonnegative");
	const std::vector<T> theta = net.parameters();
	const std::vector<T> grad = net.loss_and_gradient(x, labels).second;
	return inner_step<T>(theta, grad, epsilon, mode);
}

template <typename T>
using GradientFn = std::function<std::vector<T>(std::span<const T>)>;

/**
 * Central-difference Hessian-vector product:
 * (grad(theta + h v) - grad(theta - h v)) / (2h).
 *
 * Truncation error is O(h^2) for smooth losses and zero for quadratics.
 */
template <typename T>
std::vector<T> hvp_central(const GradientFn<T>& gradient, std::span<const T> theta, std::span<const T> direction, double h) {
	if (!(h > 0.0)) throw NumericError("hvp_central step must be positive");
	if (theta.size() != direction.size()) throw ShapeError("hvp_central: parameter and direction lengths differ");
	std::vector<T> plus(theta.begin(), theta.end()), minus(theta.begin(), theta.end());
	for (std::size_t i = 0; i < plus.size(); ++i) {
		if (!std::isfinite(direction[i])) throw NumericError("hvp_central: non-finite direction");
		plus[i] += static_cast<T>(h) * direction[i];
		minus[i] -= static_cast<T>(h) * direction[i];
	}
	const std::vector<T> gp = gradient(plus);
	const std::vector<T> gm = gradient(minus);
	std::vector<T> out(theta.size());
	for (std::size_t i = 0; i < out.size(); ++i) {
		out[i] = (gp[i] - gm[i]) / static_cast<T>(2.0 * h);
		if (!std::isfinite(out[i])) throw NumericError("hvp_central: non-finite intermediate gradient");
	}
	return out;
}

/// HVP of the network loss at its current parameters; two forward/backward passes.
template <typename T>
std::vector<T> hvp_central(const BasicNetwork<T>& net, const BasicTensor<T>& x, std::span<const std::size_t> labels,
		std::span<const T> direction, double h) {
	const GradientFn<T> gradient = [&](std::span<const T> theta) {
		return net.with_parameters(theta).loss_and_gradient(x, labels).second;
	};
	const std::vector<T> theta = net.parameters();
	return hvp_central<T>(gradient, theta, direction, h);
}

/**
 * Everything an order-1 map is combined from.
 *
 * `*_prime` are the tap activation/gradient under theta', `*_plus` and
 * `*_minus` under theta +/- h * grad_{theta'} l(theta', x).
 */
template <typename T>
struct Order1Components {
	std::string tap;
	Order1Mode mode = Order1Mode::training;
	double epsilon = 0;
	double h = 0;
	BasicTensor<T> x_prime, g_prime;
	BasicTensor<T> x_plus, g_plus;
	BasicTensor<T> x_minus, g_minus;
};

/**
 * Combines stored components into an order-1 map.
 *
 * factorized: ||g' -/+ (eps/2h)(g+ - g-)|| * ||x'||
 * exact:      ||g' x'^T -/+ (eps/2h)(g+ x+^T - g- x-^T)||_F
 * The minus sign is the training map, plus the adversarial one.
 */
template <typename T>
BasicTensor<T> combine_order1(const Order1Components<T>& c, Order1Mode mode, Order1Form form) {
	require_same_shape(c.g_prime, c.g_plus, "combine_order1");
	require_same_shape(c.g_prime, c.g_minus, "combine_order1");
	require_same_shape(c.g_prime, c.x_prime, "combine_order1");
	detail::require_spatial(c.g_prime, "combine_order1");
	const std::size_t batch = c.g_prime.dim(0), channels = c.g_prime.dim(1), area = c.g_prime.dim(2) * c.g_prime.dim(3);
	const T coeff = static_cast<T>((mode == Order1Mode::training ? -1.0 : 1.0) * c.epsilon / (2.0 * c.h));
	BasicTensor<T> out({batch, c.g_prime.dim(2), c.g_prime.dim(3)});
	auto at = [&](std::size_t n, std::size_t ch, std::size_t i) { return (n * channels + ch) * area + i; };
	if (form == Order1Form::factorized) {
		for (std::size_t n = 0; n < batch; ++n) {
			for (std::size_t i = 0; i < area; ++i) {
				T gsq = 0, xsq = 0;
				for (std::size_t ch = 0; ch < channels; ++ch) {
					const std::size_t k = at(n, ch, i);
					const T g = c.g_prime[k] + coeff * (c.g_plus[k] - c.g_minus[k]);
					gsq += g * g;
					xsq += c.x_prime[k] * c.x_prime[k];
				}
				out[n * area + i] = std::sqrt(gsq) * std::sqrt(xsq);
			}
		}
		return out;
	}
	require_same_shape(c.g_prime, c.x_plus, "combine_order1");
	require_same_shape(c.g_prime, c.x_minus, "combine_order1");
	for (std::size_t n = 0; n < batch; ++n) {
		for (std::size_t i = 0; i < area; ++i) {
			T fsq = 0;
			for (std::size_t r = 0; r < channels; ++r) {
				const std::size_t kr = at(n, r, i);
				for (std::size_t s = 0; s < channels; ++s) {
					const std::size_t ks = at(n, s, i);
					const T m = c.g_prime[kr] * c.x_prime[ks] +
							coeff * (c.g_plus[kr] * c.x_plus[ks] - c.g_minus[kr] * c.x_minus[ks]);
					fsq += m * m;
				}
			}
			out[n * area + i] = std::sqrt(fsq);
		}
	}
	return out;
}

template <typename T>
struct Order1Result {
	BasicSaliencyMap<T> map;
	Order1Components<T> components;
	std::vector<T> theta_prime;
	std::size_t target = 0;
};

/**
 * Order-1 NormGrad of a single image at `tap`.
 *
 * Runs exactly four forward/backward passes: at theta (inner gradient), at
 * theta' with capture (also yields the direction grad_{theta'} l), and at
 * theta+ and theta- with capture. The network is left untouched; perturbed
 * parameter sets live in copies sharing its pass counter. Empty `labels`
 * target the class predicted at theta.
 */
template <typename T>
Order1Result<T> order1_map(const BasicNetwork<T>& net, const BasicTensor<T>& x, std::span<const std::size_t> labels,
		const std::string& tap, const Order1Config& cfg) {
	cfg.validate();
	if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("order1_map computes per-image maps; pass a batch of one");
	const std::size_t position = net.tap_position(tap);
	if (net.tap_shape(position).size() != 3) throw ShapeError("order1_map: tap '" + tap + "' is not spatial");
	const std::vector<std::string> taps{tap};

	const std::vector<T> theta = net.parameters();
	std::vector<std::size_t> targets(labels.begin(), labels.end());
	std::vector<T> grad_theta;
	{
		const ForwardCache<T> cache = net.forward(x);
		if (targets.empty()) targets = BasicNetwork<T>::argmax_rows(cache.logits());
		const LossResult<T> lr = cross_entropy(cache.logits(), targets);
		grad_theta = net.flatten_grads(net.backward(cache, lr.seed).param_grads);
	}
	std::vector<T> theta_prime = inner_step<T>(theta, grad_theta, cfg.epsilon, cfg.mode);

	auto captured_pass = [&](std::span<const T> params, std::vector<T>* flat_grad) {
		const BasicNetwork<T> perturbed = net.with_parameters(params);
		const ForwardCache<T> cache = perturbed.forward(x);
		const LossResult<T> lr = cross_entropy(cache.logits(), targets);
		BackwardResult<T> br = perturbed.backward(cache, lr.seed, taps);
		if (flat_grad) *flat_grad = perturbed.flatten_grads(br.param_grads);
		return std::move(br.captures.front());
	};

	std::vector<T> direction;
	BasicTapCapture<T> at_prime = captured_pass(theta_prime, &direction);
	for (T v : direction) {
		if (!std::isfinite(v)) throw NumericError("order1_map: non-finite gradient at theta'");
	}
	const double h = cfg.fd_step.step<T>(direction);

	std::vector<T> theta_plus = theta, theta_minus = theta;
	for (std::size_t i = 0; i < theta.size(); ++i) {
		theta_plus[i] += static_cast<T>(h) * direction[i];
		theta_minus[i] -= static_cast<T>(h) * direction[i];
	}
	BasicTapCapture<T> at_plus = captured_pass(theta_plus, nullptr);
	BasicTapCapture<T> at_minus = captured_pass(theta_minus, nullptr);

	Order1Result<T> result;
	result.components = {tap, cfg.mode, cfg.epsilon, h, std::move(at_prime.activation), std::move(at_prime.grad),
			std::move(at_plus.activation), std::move(at_plus.grad), std::move(at_minus.activation),
			std::move(at_minus.grad)};
	result.map.values = combine_order1(result.components, cfg.mode, cfg.form);
	result.map.tap = tap;
	result.map.method = cfg.mode == Order1Mode::training ? Method::normgrad1 : Method::normgrad1_adv;
	result.map.meta = {{"epsilon", cfg.epsilon}, {"fd_step", h},
			{"exact_form", cfg.form == Order1Form::exact ? 1.0 : 0.0}};
	result.theta_prime = std::move(theta_prime);
	result.target = targets.front();
	return result;
}

} // namespace normgrad

#endif // NORMGRAD_ORDER1_HPP_
