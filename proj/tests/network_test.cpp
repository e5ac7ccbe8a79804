#include <gtest/gtest.h>

#include <cmath>

#include "normgrad/network.hpp"
#include "oracles.hpp"

using namespace normgrad;

namespace {

// Exercises every layer kind; 206 parameters.
Network mixed_net(std::uint64_t seed) {
	Network net({2, 8, 8}, {
			Layer::conv2d("conv1", 2, 3, 3, 1, 1),
			Layer::relu("relu1"),
			Layer::maxpool("pool1", 2, 2),
			Layer::conv2d("conv2", 3, 4, 3, 2, 1),
			Layer::relu("relu2"),
			Layer::avgpool("pool2", 2, 2),
			Layer::flatten("flat"),
			Layer::linear("fc", 4, 3),
	});
	net.initialize(seed);
	return net;
}

// conv3x3 -> relu -> 1x1 conv -> relu -> gap -> linear
Network one_by_one_net(std::uint64_t seed) {
	Network net({3, 6, 6}, {
			Layer::conv2d("conv1", 3, 4, 3, 1, 1),
			Layer::relu("relu1"),
			Layer::conv2d("conv2", 4, 5, 1),
			Layer::relu("relu2"),
			Layer::conv2d("conv3", 5, 4, 3, 1, 1),
			Layer::global_avg_pool("gap"),
			Layer::linear("fc", 4, 3),
	});
	net.initialize(seed);
	Rng rng(seed + 100);
	for (std::size_t i = 0; i < net.layers().size(); ++i) {
		if (!net.layer(i).has_params()) continue;
		for (auto& b : net.layer(i).bias.data()) b = rng.uniform(-0.1, 0.1);
	}
	return net;
}

double loss_at(const Network& net, const std::vector<double>& theta, const Tensor& x, const std::vector<std::size_t>& y) {
	return net.with_parameters(theta).forward(x, y).first;
}

} // namespace

TEST(Network, UniformLogitsGiveLogClasses) {
	Network net = one_by_one_net(1);
	Layer& fc = net.layer(net.layer_index("fc"));
	fc.weight.fill(0.0);
	fc.bias.fill(0.0);
	Rng rng(2);
	const Tensor x = oracle::random_tensor({4, 3, 6, 6}, rng);
	EXPECT_NEAR(net.forward(x, std::vector<std::size_t>{0, 1, 2, 0}).first, std::log(3.0), 1e-15);
}

TEST(Network, SingleLinearLayerMatchesHandCrossEntropy) {
	Network net({2, 1, 1}, {Layer::flatten("flat"), Layer::linear("fc", 2, 3)});
	net.layer(1).weight = Tensor({3, 2}, {1, 0, 0, 1, 1, 1});
	const Tensor x({1, 2, 1, 1}, {1, 2});
	// logits (1, 2, 3), label 2: loss = log(e + e^2 + e^3) - 3
	const double want = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
	EXPECT_NEAR(net.forward(x, std::vector<std::size_t>{2}).first, want, 1e-15);
}

TEST(Network, IdenticalBatchEqualsSingleLoss) {
	const Network net = mixed_net(3);
	Rng rng(4);
	const Tensor one = oracle::random_tensor({1, 2, 8, 8}, rng);
	Tensor batch({5, 2, 8, 8});
	for (std::size_t n = 0; n < 5; ++n)
		std::copy(one.values().begin(), one.values().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(n * one.size()));
	const double single = net.forward(one, std::vector<std::size_t>{1}).first;
	EXPECT_NEAR(net.forward(batch, std::vector<std::size_t>(5, 1)).first, single, 1e-14);
}

TEST(Network, ConstructionRejectsBadComposition) {
	EXPECT_THROW(Network({3, 8, 8}, {Layer::conv2d("c", 2, 4, 3), Layer::global_avg_pool("g"), Layer::linear("fc", 4, 2)}),
			ShapeError);
	EXPECT_THROW(Network({3, 8, 8}, {Layer::conv2d("c", 3, 4, 3), Layer::flatten("f"), Layer::linear("fc", 4, 2)}),
			ShapeError);
	EXPECT_THROW(Network({3, 2, 2}, {Layer::conv2d("c", 3, 4, 3), Layer::global_avg_pool("g"), Layer::linear("fc", 4, 2)}),
			ShapeError);
	EXPECT_THROW(Network({3, 8, 8}, {Layer::relu("a"), Layer::relu("a"), Layer::flatten("f")}), ShapeError);
	// no flat head
	EXPECT_THROW(Network({3, 8, 8}, {Layer::relu("a")}), ShapeError);
}

TEST(Network, LabelOutOfRange) {
	const Network net = mixed_net(1);
	EXPECT_THROW(net.forward(Tensor({1, 2, 8, 8}), std::vector<std::size_t>{3}), RangeError);
	EXPECT_THROW(net.forward(Tensor({1, 3, 8, 8})), ShapeError);
}

TEST(Network, TapNamesAndUnknownTap) {
	const Network net = mixed_net(1);
	EXPECT_EQ(net.tap_name(0), "input");
	EXPECT_EQ(net.tap_position("after:relu1"), 2u);
	EXPECT_EQ(net.tap_names().size(), net.layers().size() + 1);
	const auto cache = net.forward(Tensor({1, 2, 8, 8}));
	const std::vector<std::string> taps{"after:nope"};
	EXPECT_THROW(net.backward(cache, Tensor({1, 3}), taps), RangeError);
	EXPECT_THROW(net.tap_position("relu1"), RangeError);
}

TEST(Network, ParameterGradientsMatchFiniteDifferences) {
	for (std::uint64_t seed : {1u, 2u, 3u}) {
		for (const Network& net : {mixed_net(seed), one_by_one_net(seed)}) {
			ASSERT_LE(net.parameter_count(), 500u);
			Rng rng(seed * 7);
			const Shape& in = net.input_shape();
			const Tensor x = oracle::random_tensor({2, in[0], in[1], in[2]}, rng);
			const std::vector<std::size_t> y{0, 2};
			const std::vector<double> analytic = net.loss_and_gradient(x, y).second;
			const std::vector<double> numeric = oracle::fd_gradient(
					[&](const std::vector<double>& t) { return loss_at(net, t, x, y); }, net.parameters(), 1e-5);
			EXPECT_LT(oracle::rel_error(analytic, numeric), 1e-6) << "seed " << seed;
		}
	}
}

TEST(Network, InputTapGradientMatchesPixelFiniteDifferences) {
	const Network net = mixed_net(5);
	Rng rng(6);
	Tensor x = oracle::random_tensor({1, 2, 8, 8}, rng);
	const std::vector<std::size_t> y{1};
	const auto cache = net.forward(x);
	const auto lr = cross_entropy(cache.logits(), y);
	const std::vector<std::string> taps{"input"};
	const auto br = net.backward(cache, lr.seed, taps);
	const Tensor& g = br.captures[0].grad;
	ASSERT_EQ(g.shape(), x.shape());
	std::vector<double> analytic, numeric;
	for (std::size_t s = 0; s < 100; ++s) {
		const std::size_t i = rng.index(x.size());
		const double keep = x[i];
		x[i] = keep + 1e-5;
		const double fp = net.forward(x, y).first;
		x[i] = keep - 1e-5;
		const double fm = net.forward(x, y).first;
		x[i] = keep;
		analytic.push_back(g[i]);
		numeric.push_back((fp - fm) / 2e-5);
	}
	EXPECT_LT(oracle::rel_error(analytic, numeric), 1e-6);
}

TEST(Network, TapsAreTransparent) {
	const Network net = one_by_one_net(4);
	Rng rng(8);
	const Tensor x = oracle::random_tensor({3, 3, 6, 6}, rng);
	const std::vector<std::size_t> y{0, 1, 2};
	const auto cache = net.forward(x);
	const auto lr = cross_entropy(cache.logits(), y);
	const auto plain = net.backward(cache, lr.seed);
	const std::vector<std::string> taps = net.tap_names();
	const auto tapped = net.backward(cache, lr.seed, taps);
	ASSERT_EQ(tapped.captures.size(), taps.size());
	for (std::size_t i = 0; i < net.layers().size(); ++i) {
		EXPECT_EQ(plain.param_grads[i].weight, tapped.param_grads[i].weight);
		EXPECT_EQ(plain.param_grads[i].bias, tapped.param_grads[i].bias);
	}
	for (const auto& c : tapped.captures) EXPECT_EQ(c.activation.shape(), c.grad.shape()) << c.tap;
}

TEST(Network, OuterProductSumEqualsOneByOneWeightGradient) {
	const Network net = one_by_one_net(9);
	Rng rng(10);
	const Tensor x = oracle::random_tensor({2, 3, 6, 6}, rng);
	const std::vector<std::size_t> y{2, 0};
	const auto cache = net.forward(x);
	const auto lr = cross_entropy(cache.logits(), y);
	const std::vector<std::string> taps{"after:relu1", "after:conv2"};
	const auto br = net.backward(cache, lr.seed, taps);
	const Tensor want = br.param_grads[net.layer_index("conv2")].weight;
	const Tensor got = oracle::outer_product_sum(br.captures[1].grad, br.captures[0].activation);
	EXPECT_LT(oracle::rel_error(got.reshaped(want.shape()), want), 1e-12);
}

TEST(Network, WeightGradFromTapsMatchesBackward) {
	for (std::uint64_t seed : {11u, 12u}) {
		const Network net = one_by_one_net(seed);
		Rng rng(seed);
		const Tensor x = oracle::random_tensor({2, 3, 6, 6}, rng);
		const std::vector<std::size_t> y{1, 1};
		const auto cache = net.forward(x);
		const auto lr = cross_entropy(cache.logits(), y);
		const std::vector<std::string> taps = net.tap_names();
		const auto br = net.backward(cache, lr.seed, taps);
		for (const std::string conv : {"conv1", "conv2", "conv3"}) {
			const std::size_t li = net.layer_index(conv);
			const Tensor got = weight_grad_from_taps(br.captures[li], br.captures[li + 1].grad, net.layer(li).window);
			EXPECT_LT(oracle::max_abs_diff(got, br.param_grads[li].weight), 1e-10) << conv;
		}
		const std::size_t li = net.layer_index("conv1");
		const Tensor zero = weight_grad_from_taps(br.captures[li], Tensor(br.captures[li + 1].grad.shape()),
				net.layer(li).window);
		EXPECT_EQ(max_abs(zero), 0.0);
		EXPECT_THROW(weight_grad_from_taps(br.captures[li], br.captures[li + 1].grad, WindowGeometry{3, 3, 2, 1}),
				ShapeError);
	}
}

TEST(Network, IdentityConvInsertionPreservesOutputs) {
	const Network net = mixed_net(13);
	const Network with_id = net.with_layer_inserted(2, Layer::identity_conv("id", 3));
	Rng rng(14);
	const Tensor x = oracle::random_tensor({2, 2, 8, 8}, rng);
	EXPECT_EQ(net.forward(x).logits(), with_id.forward(x).logits());
}

TEST(Network, PassCounterIsSharedByCopies) {
	const Network net = mixed_net(1);
	net.counter().reset();
	const Tensor x({1, 2, 8, 8});
	const Network copy = net.with_parameters(net.parameters());
	(void)copy.loss_and_gradient(x, std::vector<std::size_t>{0});
	(void)net.forward(x);
	EXPECT_EQ(net.counter().forward, 2u);
	EXPECT_EQ(net.counter().backward, 1u);
}

TEST(Network, ParameterRoundTrip) {
	Network net = mixed_net(15);
	std::vector<double> theta = net.parameters();
	for (auto& v : theta) v *= 2.0;
	net.set_parameters(theta);
	EXPECT_EQ(net.parameters(), theta);
	EXPECT_THROW(net.set_parameters(std::vector<double>(3)), ShapeError);
}
