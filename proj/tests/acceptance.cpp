// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "normgrad.hpp"
#include "oracles.hpp"

using namespace normgrad;

namespace {

// Pinned tolerances.
constexpr double kDecompositionTol = 1e-12;
constexpr double kDecompositionSeconds = 5;
constexpr double kGeneralFilterTol = 1e-6;
constexpr double kGeneralFilterStep = 1e-5;
constexpr double kGeneralFilterSeconds = 30;
constexpr double kGradCamTol = 1e-10;
constexpr double kHvpQuadraticTol = 1e-10;
constexpr double kHvpHalvingRatio = 2;
constexpr double kEpsLimitEps = 1e-8;
constexpr double kEpsLimitTol = 1e-4;
constexpr double kEpsHalvingAt = 1e-4;
constexpr double kEpsHalvingRatio = 1.9;
constexpr double kIdentityTol = 1e-12;
constexpr double kTrainedAccuracy = 0.95;
constexpr double kLocalizationFraction = 0.90;
constexpr double kModeTol = 1e-12;
const std::string kMidTap = "after:relu2";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
	std::printf("[%s] %d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
	std::fflush(stdout);
	if (!pass) ++failures;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
	char buf[512];
	std::snprintf(buf, sizeof buf, f, args...);
	return buf;
}

void randomize_biases(Network& net, std::uint64_t seed) {
	Rng rng(seed);
	for (std::size_t i = 0; i < net.layers().size(); ++i) {
		if (!net.layer(i).has_params()) continue;
		for (auto& b : net.layer(i).bias.data()) b = rng.uniform(-0.1, 0.1);
	}
}

struct Capture {
	BackwardResult<double> br;
	std::vector<std::string> taps;
	const TapCapture& at(const std::string& tap) const {
		for (std::size_t i = 0; i < taps.size(); ++i)
			if (taps[i] == tap) return br.captures[i];
		throw RangeError("not captured: " + tap);
	}
};

Capture capture(const Network& net, const Tensor& x, const std::vector<std::size_t>& y, std::vector<std::string> taps) {
	const auto cache = net.forward(x);
	const auto lr = cross_entropy(cache.logits(), y);
	Capture c{{}, std::move(taps)};
	c.br = net.backward(cache, lr.seed, c.taps);
	return c;
}

std::vector<std::string> spatial_taps(const Network& net) {
	std::vector<std::string> out;
	for (std::size_t p = 0; p < net.tap_count(); ++p)
		if (net.tap_shape(p).size() == 3) out.push_back(net.tap_name(p));
	return out;
}

Tensor order0_at(const Network& net, const Tensor& x, const std::vector<std::size_t>& y, const std::string& tap) {
	return normgrad_identity_trick(capture(net, x, y, {tap}).at(tap)).values;
}

// Criterion 1
void decomposition() {
	const auto t0 = Clock::now();
	double worst = 0;
	for (std::uint64_t seed = 1; seed <= 20; ++seed) {
		Network net({3, 10, 10}, {
				Layer::conv2d("conv1", 3, 6, 3, 1, 1),
				Layer::relu("relu1"),
				Layer::conv2d("conv2", 6, 5, 1),
				Layer::relu("relu2"),
				Layer::conv2d("conv3", 5, 4, 3, 2, 1),
				Layer::global_avg_pool("gap"),
				Layer::linear("fc", 4, 3),
		});
		net.initialize(seed);
		randomize_biases(net, seed + 1000);
		Rng rng(seed);
		const Tensor x = oracle::random_tensor({2, 3, 10, 10}, rng);
		const Capture c = capture(net, x, {seed % 3, (seed + 1) % 3}, {"after:relu1", "after:conv2"});
		const Tensor sum = oracle::outer_product_sum(c.at("after:conv2").grad, c.at("after:relu1").activation);
		const Tensor& dw = c.br.param_grads[net.layer_index("conv2")].weight;
		worst = std::max(worst, oracle::rel_error(sum.values(), dw.values()));
	}
	const double secs = seconds_since(t0);
	report(1, "decomposition identity", worst < kDecompositionTol && secs < kDecompositionSeconds,
			fmt("max rel err %.3e (tol %.0e) over 20 seeds; %.2f s (limit %.0f s)", worst, kDecompositionTol, secs,
					kDecompositionSeconds));
}

// Criterion 2
void general_filter_gradient() {
	const auto t0 = Clock::now();
	Network net = make_toy_cnn(3, 16, 3, 4);
	net.initialize(7);
	randomize_biases(net, 70);
	Rng rng(7);
	const Tensor x = oracle::random_tensor({2, 3, 16, 16}, rng, 0, 1);
	const std::vector<std::size_t> y{0, 2};
	const std::size_t li = net.layer_index("conv2");
	const Layer& conv = net.layer(li);
	const Capture c = capture(net, x, y, {"after:pool1", "after:conv2"});
	const Tensor assembled = weight_grad_from_taps(c.at("after:pool1"), c.at("after:conv2").grad, conv.window);

	std::size_t offset = 0;
	for (std::size_t i = 0; i < li; ++i)
		if (net.layer(i).has_params()) offset += net.layer(i).weight.size() + net.layer(i).bias.size();
	const std::size_t count = conv.weight.size();
	std::vector<double> theta = net.parameters(), numeric(count);
	for (std::size_t j = 0; j < count; ++j) {
		const double keep = theta[offset + j];
		theta[offset + j] = keep + kGeneralFilterStep;
		const double lp = net.with_parameters(theta).forward(x, y).first;
		theta[offset + j] = keep - kGeneralFilterStep;
		const double lm = net.with_parameters(theta).forward(x, y).first;
		theta[offset + j] = keep;
		numeric[j] = (lp - lm) / (2 * kGeneralFilterStep);
	}
	const double err = oracle::rel_error(assembled.values(), numeric);
	const double secs = seconds_since(t0);
	report(2, "general-filter gradient",
			err < kGeneralFilterTol && secs < kGeneralFilterSeconds && count <= 500 && conv.window.kernel_h == 3,
			fmt("(dl/dX'')^T im2row(x') vs central FD (step %.0e) over all %zu weights of a 3x3 conv: rel err %.3e "
				"(tol %.0e); %.2f s (limit %.0f s)",
					kGeneralFilterStep, count, err, kGeneralFilterTol, secs, kGeneralFilterSeconds));
}

// Criterion 3
void gradcam_relation(const Network& net, const Dataset& ds) {
	const std::string tap = "after:relu3";
	const bool gap_follows = net.layer(net.tap_position(tap)).kind == LayerKind::global_avg_pool;
	double worst = 0;
	std::size_t locations = 0;
	for (std::size_t idx : ds.val) {
		const Tensor x = batch_slice(ds.images, idx);
		const Capture c = capture(net, x, {ds.labels[idx]}, {tap});
		const TapCapture& cap = c.at(tap);
		const SaliencyMap cam = gradcam(cap);
		const SaliencyMap ng = normgrad_identity_trick(cap);
		for (std::size_t v = 0; v < cam.height(); ++v)
			for (std::size_t u = 0; u < cam.width(); ++u) {
				const Tensor g = spatial_column(cap.grad, 0, v, u), a = spatial_column(cap.activation, 0, v, u);
				if (frobenius_norm(g) == 0 || frobenius_norm(a) == 0) continue;
				++locations;
				const std::size_t i = v * cam.width() + u;
				worst = std::max(worst, std::abs(cam.values[i] - cosine_plus(g, a) * ng.values[i]));
			}
	}
	report(3, "Grad-CAM relation", gap_follows && locations > 0 && worst < kGradCamTol,
			fmt("trained toy CNN, %s (global-average-pool input), %zu val images, %zu nonzero-norm locations: max abs "
				"err %.3e (tol %.0e)",
					tap.c_str(), ds.val.size(), locations, worst, kGradCamTol));
}

// Criterion 4
void hvp_oracle() {
	Network mlp({2, 2, 2}, {Layer::flatten("f"), Layer::linear("l1", 8, 6), Layer::relu("r"), Layer::linear("l2", 6, 3)});
	mlp.initialize(3);
	randomize_biases(mlp, 30);
	Rng rng(3);
	const Tensor x = oracle::random_tensor({4, 2, 2, 2}, rng);
	const std::vector<std::size_t> y{0, 1, 2, 1};
	const std::size_t p = mlp.parameter_count();
	const std::vector<double> dir = oracle::random_vector(p, rng);
	const auto grad = [&](const std::vector<double>& t) { return mlp.with_parameters(t).loss_and_gradient(x, y).second; };
	const std::vector<double> hv = oracle::mat_vec(oracle::fd_hessian(grad, mlp.parameters(), 1e-6), dir);
	std::vector<double> errs;
	for (double h : {1e-2, 5e-3, 2.5e-3}) errs.push_back(oracle::rel_error(hvp_central<double>(mlp, x, y, dir, h), hv));
	const double r1 = errs[0] / errs[1], r2 = errs[1] / errs[2];

	constexpr std::size_t n = 5;
	std::vector<std::vector<double>> a(n, std::vector<double>(n));
	for (std::size_t i = 0; i < n; ++i)
		for (std::size_t j = 0; j <= i; ++j) a[i][j] = a[j][i] = rng.uniform(-1, 1);
	const GradientFn<double> quad = [&](std::span<const double> t) {
		return oracle::mat_vec(a, std::vector<double>(t.begin(), t.end()));
	};
	const std::vector<double> theta = oracle::random_vector(n, rng), v = oracle::random_vector(n, rng);
	const std::vector<double> av = oracle::mat_vec(a, v);
	double quad_err = 0;
	for (double h : {1e-1, 1e-2, 1e-3, 1e-4}) quad_err = std::max(quad_err, oracle::rel_error(hvp_central<double>(quad, theta, v, h), av));

	report(4, "HVP oracle", p <= 100 && r1 >= kHvpHalvingRatio && r2 >= kHvpHalvingRatio && quad_err < kHvpQuadraticTol,
			fmt("MLP (%zu params) errors %.2e/%.2e/%.2e at h=1e-2/5e-3/2.5e-3, halving ratios %.2f, %.2f (min %.0f); "
				"quadratic max err %.2e over h in [1e-4,1e-1] (tol %.0e)",
					p, errs[0], errs[1], errs[2], r1, r2, kHvpHalvingRatio, quad_err, kHvpQuadraticTol));
}

// Criterion 5
void epsilon_limit(const Network& trained, const Dataset& ds) {
	struct Case {
		const Network* net;
		Tensor x;
		std::vector<std::size_t> y;
	};
	std::vector<Network> randoms;
	for (std::uint64_t seed = 1; seed <= 10; ++seed) {
		randoms.push_back(make_toy_cnn(3, 32, 3));
		randoms.back().initialize(seed);
	}
	std::vector<Case> cases;
	for (std::uint64_t seed = 1; seed <= 10; ++seed) {
		Rng rng(seed);
		cases.push_back({&randoms[seed - 1], oracle::random_tensor({1, 3, 32, 32}, rng, 0, 1), {seed % 3}});
	}
	for (std::size_t k = 0; k < 10; ++k) {
		const std::size_t idx = ds.val[k];
		cases.push_back({&trained, batch_slice(ds.images, idx), {ds.labels[idx]}});
	}

	double worst_limit = 0, worst_pointwise = 0, min_ratio = 1e300, max_ratio = 0;
	std::size_t checked = 0, zero_locations = 0, theta_ref_below = 0;
	for (const Case& c : cases) {
		for (const std::string& tap : spatial_taps(*c.net)) {
			Order1Config cfg;
			cfg.epsilon = kEpsLimitEps;
			const Tensor m1 = order1_map(*c.net, c.x, c.y, tap, cfg).map.values;
			const Tensor m0 = order0_at(*c.net, c.x, c.y, tap);
			worst_limit = std::max(worst_limit, oracle::rel_error(m1, m0));
			for (std::size_t i = 0; i < m0.size(); ++i) {
				if (m0[i] == 0) {
					zero_locations += m1[i] != 0;
					continue;
				}
				worst_pointwise = std::max(worst_pointwise, std::abs(m1[i] - m0[i]) / m0[i]);
			}

			// Gap to order 0 evaluated at each run's own theta'.
			double gaps[2], theta_gaps[2];
			for (int k = 0; k < 2; ++k) {
				cfg.epsilon = kEpsHalvingAt / (k + 1);
				const auto r = order1_map(*c.net, c.x, c.y, tap, cfg);
				gaps[k] = oracle::rel_error(r.map.values, order0_at(c.net->with_parameters(r.theta_prime), c.x, c.y, tap));
				theta_gaps[k] = oracle::rel_error(r.map.values, m0);
			}
			const double ratio = gaps[0] / gaps[1];
			min_ratio = std::min(min_ratio, ratio);
			max_ratio = std::max(max_ratio, ratio);
			theta_ref_below += theta_gaps[0] / theta_gaps[1] < kEpsHalvingRatio;
			++checked;
		}
	}
	std::printf("  info 5: pointwise |m1-m0|/m0 at eps=%.0e max %.3e over m0>0; %zu locations with m0=0 and m1!=0\n",
			kEpsLimitEps, worst_pointwise, zero_locations);
	std::printf("  info 5: with order-0 at theta as the halving reference, %zu/%zu cases fall below %.1f\n",
			theta_ref_below, checked, kEpsHalvingRatio);
	report(5, "epsilon limit", worst_limit < kEpsLimitTol && min_ratio >= kEpsHalvingRatio,
			fmt("eps=%.0e: max_u |m1_u-m0_u|/max|m0| = %.3e (tol %.0e); gap ratio eps %.0e -> %.0e in [%.4f, %.4f] "
				"(min %.1f) over %zu (net, image, tap) cases",
					kEpsLimitEps, worst_limit, kEpsLimitTol, kEpsHalvingAt, kEpsHalvingAt / 2, min_ratio, max_ratio,
					kEpsHalvingRatio, checked));
}

// Criterion 6
void pass_budgets(const Network& net, const Dataset& ds) {
	const std::vector<std::string> taps = spatial_taps(net);
	const Tensor batch = batch_gather(ds.images, std::vector<std::size_t>(ds.val.begin(), ds.val.begin() + 4));
	std::string detail;
	bool ok = true;
	for (Method m : {Method::normgrad0, Method::gradcam}) {
		const std::uint64_t f0 = net.counter().forward, b0 = net.counter().backward;
		const AttributionResult r = attribute(net, batch, {m, taps, {}, {}, {}});
		const std::uint64_t f = net.counter().forward - f0, b = net.counter().backward - b0;
		ok = ok && f == 1 && b == 1 && r.forward_passes == 1 && r.backward_passes == 1 && r.maps.size() == taps.size();
		detail += fmt("%s %zu taps x 4 images: %llu fwd/%llu bwd; ", std::string(method_name(m)).c_str(), taps.size(),
				static_cast<unsigned long long>(f), static_cast<unsigned long long>(b));
	}
	for (Method m : {Method::normgrad1, Method::normgrad1_adv}) {
		const std::uint64_t f0 = net.counter().forward, b0 = net.counter().backward;
		(void)attribute(net, batch_slice(ds.images, ds.val[0]), {m, {kMidTap}, {}, {}, {}});
		const std::uint64_t f = net.counter().forward - f0, b = net.counter().backward - b0;
		ok = ok && f == 4 && b == 4;
		detail += fmt("%s: %llu fwd/%llu bwd; ", std::string(method_name(m)).c_str(), static_cast<unsigned long long>(f),
				static_cast<unsigned long long>(b));
	}
	report(6, "pass budgets", ok, detail + "expected 1 and 4");
}

// Criterion 7
void identity_trick(const Network& net, const Dataset& ds) {
	const std::vector<std::size_t> y(ds.labels.begin(), ds.labels.begin() + 4);
	const Tensor x = batch_gather(ds.images, std::vector<std::size_t>{0, 1, 2, 3});
	double worst = 0;
	std::string depths;
	for (const std::string tap : {"after:relu1", "after:relu2", "after:relu3"}) {
		const std::size_t pos = net.tap_position(tap);
		const Network lit = net.with_layer_inserted(pos, Layer::identity_conv("identity", net.tap_shape(pos)[0]));
		const Capture with = capture(lit, x, y, {tap, "after:identity"});
		const SaliencyMap want = normgrad_1x1(with.at(tap), with.at("after:identity"));
		const SaliencyMap got = normgrad_identity_trick(capture(net, x, y, {tap}).at(tap));
		worst = std::max(worst, oracle::rel_error(got.values, want.values));
		depths += (depths.empty() ? "" : ", ") + tap;
	}
	report(7, "identity trick", worst < kIdentityTol,
			fmt("vs a literal identity 1x1 conv at %s: max rel err %.3e (tol %.0e)", depths.c_str(), worst, kIdentityTol));
}

// Fraction of correctly classified val images whose mean map value inside the mask beats the mean outside.
double localization_fraction(const Network& net, const Dataset& ds, const std::string& tap, std::size_t& correct) {
	const std::size_t size = ds.images.dim(2);
	const Tensor x = batch_gather(ds.images, ds.val);
	std::vector<std::size_t> labels;
	for (std::size_t i : ds.val) labels.push_back(ds.labels[i]);
	const std::vector<std::size_t> pred = net.predict(x);
	const AttributionResult r = attribute(net, x, {Method::normgrad0, {tap}, {}, labels, {}});
	const SaliencyMap& m = r.maps[0];
	std::size_t wins = 0;
	correct = 0;
	for (std::size_t k = 0; k < ds.val.size(); ++k) {
		if (pred[k] != labels[k]) continue;
		++correct;
		const Tensor up = upsample_map(batch_slice(m.values, k).reshaped({m.height(), m.width()}), size, size,
				Interpolation::bilinear);
		double in = 0, out = 0;
		std::size_t n_in = 0, n_out = 0;
		for (std::size_t p = 0; p < size * size; ++p) {
			if ((*ds.masks)[ds.val[k] * size * size + p] > 0.5) {
				in += up[p];
				++n_in;
			} else {
				out += up[p];
				++n_out;
			}
		}
		wins += n_in > 0 && n_out > 0 && in / static_cast<double>(n_in) > out / static_cast<double>(n_out);
	}
	return correct ? static_cast<double>(wins) / static_cast<double>(correct) : 0.0;
}

// Criterion 8
void localization(const Network& net, const Dataset& ds, double val_accuracy) {
	std::size_t correct = 0;
	const double frac = localization_fraction(net, ds, kMidTap, correct);
	for (const std::string& tap : spatial_taps(net)) {
		std::size_t c = 0;
		std::printf("  info 8: localization fraction at %-12s %.4f\n", tap.c_str(), localization_fraction(net, ds, tap, c));
	}
	report(8, "localization", val_accuracy >= kTrainedAccuracy && frac >= kLocalizationFraction,
			fmt("val accuracy %.4f (min %.2f); order-0 at %s, mean inside mask > mean outside on %.4f of %zu correctly "
				"classified val images (min %.2f)",
					val_accuracy, kTrainedAccuracy, kMidTap.c_str(), frac, correct, kLocalizationFraction));
}

// Criterion 9
void mode_antisymmetry(const Network& net, const Dataset& ds) {
	double recompute = 0, shared = 0, cross = 0;
	std::size_t checked = 0;
	for (std::size_t k = 0; k < 10; ++k) {
		const std::size_t idx = ds.val[k];
		const Tensor x = batch_slice(ds.images, idx);
		const std::vector<std::size_t> y{ds.labels[idx]};
		for (const std::string& tap : spatial_taps(net)) {
			Order1Config cfg;
			cfg.mode = Order1Mode::training;
			const auto tr = order1_map(net, x, y, tap, cfg);
			cfg.mode = Order1Mode::adversarial;
			const auto ad = order1_map(net, x, y, tap, cfg);
			for (const auto* r : {&tr, &ad}) {
				const Tensor again = combine_order1(r->components, r->components.mode, Order1Form::factorized);
				recompute = std::max(recompute, oracle::rel_error(again, r->map.values));
				const auto& c = r->components;
				const double kk = c.epsilon / (2 * c.h);
				const Tensor correction = scaled(c.g_plus - c.g_minus, kk);
				const Tensor want_tr = oracle::outer_product_norm_map(c.g_prime - correction, c.x_prime);
				const Tensor want_ad = oracle::outer_product_norm_map(c.g_prime + correction, c.x_prime);
				shared = std::max(shared, oracle::rel_error(combine_order1(c, Order1Mode::training, Order1Form::factorized), want_tr));
				shared = std::max(shared, oracle::rel_error(combine_order1(c, Order1Mode::adversarial, Order1Form::factorized), want_ad));
			}
			cross = std::max(cross, oracle::rel_error(ad.map.values, tr.map.values));
			++checked;
		}
	}
	std::printf("  info 9: max rel gap between the training and adversarial maps %.3e\n", cross);
	report(9, "mode antisymmetry", recompute < kModeTol && shared < kModeTol,
			fmt("%zu (image, tap) cases: direct output vs recombined stored components %.3e; both modes from one "
				"component set vs ||x'|| ||g' -/+ c|| oracle %.3e (tol %.0e)",
					checked, recompute, shared, kModeTol));
}

} // namespace

int main() {
	const auto t0 = Clock::now();
	std::printf("  training toy CNN on synth shapes:2000:32:3 (20 epochs, lr 0.05, seed 1)\n");
	std::fflush(stdout);
	const Dataset ds = synth_shapes(2000, 32, 3, 1);
	Network net = make_toy_cnn(3, 32, 3);
	net.initialize(1);
	const TrainHistory history = train(net, ds, TrainConfig{});
	const double val_accuracy = history.back().val_accuracy;
	std::printf("  trained: val accuracy %.4f, %.1f s\n", val_accuracy, seconds_since(t0));

	decomposition();
	general_filter_gradient();
	gradcam_relation(net, ds);
	hvp_oracle();
	epsilon_limit(net, ds);
	pass_budgets(net, ds);
	identity_trick(net, ds);
	localization(net, ds, val_accuracy);
	mode_antisymmetry(net, ds);

	std::printf("%d of 9 criteria failed (%.1f s)\n", failures, seconds_since(t0));
	return failures == 0 ? 0 : 1;
}
