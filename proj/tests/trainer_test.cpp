#include <gtest/gtest.h>

#include <algorithm>

#include "normgrad/trainer.hpp"

using namespace normgrad;

TEST(SynthShapes, DeterministicForASeed) {
	const Dataset a = synth_shapes(40, 16, 4, 7);
	const Dataset b = synth_shapes(40, 16, 4, 7);
	const Dataset c = synth_shapes(40, 16, 4, 8);
	EXPECT_EQ(a.images, b.images);
	EXPECT_EQ(a.labels, b.labels);
	EXPECT_EQ(a.train, b.train);
	EXPECT_NE(a.images, c.images);
}

TEST(SynthShapes, BalancedClassesAndDisjointSplit) {
	const Dataset ds = synth_shapes(103, 16, 3, 1);
	std::vector<std::size_t> hist(3);
	for (std::size_t y : ds.labels) ++hist[y];
	const auto [lo, hi] = std::minmax_element(hist.begin(), hist.end());
	EXPECT_LE(*hi - *lo, 1u);
	EXPECT_EQ(ds.val.size(), 20u);
	EXPECT_EQ(ds.train.size() + ds.val.size(), 103u);
	EXPECT_NO_THROW(ds.validate());
	EXPECT_EQ(ds.class_names, (std::vector<std::string>{"square", "disk", "triangle"}));
}

TEST(SynthShapes, MasksAreNonEmptyAndAwayFromBorder) {
	const Dataset ds = synth_shapes(60, 20, 4, 3);
	ASSERT_TRUE(ds.masks.has_value());
	const Tensor& m = *ds.masks;
	for (std::size_t n = 0; n < ds.size(); ++n) {
		double area = 0;
		for (std::size_t y = 0; y < 20; ++y)
			for (std::size_t x = 0; x < 20; ++x) {
				const double v = m[(n * 20 + y) * 20 + x];
				area += v;
				if (y == 0 || x == 0 || y == 19 || x == 19) {
					EXPECT_EQ(v, 0.0) << "sample " << n;
				}
				if (v > 0) {
					for (std::size_t c = 0; c < 3; ++c) EXPECT_GE(ds.images(n, c, y, x), 0.6);
				}
			}
		EXPECT_GT(area, 4.0) << "sample " << n;
	}
}

TEST(SynthShapes, RejectsBadArguments) {
	EXPECT_THROW(synth_shapes(10, 8, 3, 1), ShapeError);
	EXPECT_THROW(synth_shapes(10, 16, 5, 1), RangeError);
	EXPECT_THROW(synth_shapes(10, 16, 1, 1), RangeError);
}

TEST(Train, ZeroLearningRateLeavesParametersAndLossFixed) {
	const Dataset ds = synth_shapes(48, 16, 3, 2);
	Network net = make_toy_cnn(3, 16, 3, 4);
	net.initialize(5);
	const auto before = net.parameters();
	TrainConfig cfg;
	cfg.learning_rate = 0;
	cfg.epochs = 3;
	const TrainHistory h = train(net, ds, cfg);
	EXPECT_EQ(net.parameters(), before);
	ASSERT_EQ(h.size(), 3u);
	for (const auto& e : h) {
		EXPECT_NEAR(e.loss, h[0].loss, 1e-12);
		EXPECT_EQ(e.val_accuracy, h[0].val_accuracy);
	}
}

TEST(Train, SameSeedGivesIdenticalHistory) {
	const Dataset ds = synth_shapes(64, 16, 3, 2);
	TrainConfig cfg;
	cfg.epochs = 2;
	auto run = [&] {
		Network net = make_toy_cnn(3, 16, 3, 4);
		net.initialize(9);
		const TrainHistory h = train(net, ds, cfg);
		return std::make_pair(h, net.parameters());
	};
	const auto [h1, p1] = run();
	const auto [h2, p2] = run();
	EXPECT_EQ(p1, p2);
	for (std::size_t i = 0; i < h1.size(); ++i) {
		EXPECT_EQ(h1[i].loss, h2[i].loss);
		EXPECT_EQ(h1[i].val_accuracy, h2[i].val_accuracy);
	}
}

TEST(Train, FullBatchStepDecreasesLoss) {
	const Dataset ds = synth_shapes(32, 16, 2, 4);
	Network net = make_toy_cnn(3, 16, 2, 4);
	net.initialize(1);
	std::vector<std::size_t> labels;
	for (std::size_t i : ds.train) labels.push_back(ds.labels[i]);
	const Tensor x = batch_gather(ds.images, ds.train);
	const double before = net.forward(x, labels).first;
	TrainConfig cfg;
	cfg.epochs = 1;
	cfg.batch_size = ds.train.size();
	cfg.learning_rate = 0.01;
	(void)train(net, ds, cfg);
	EXPECT_LT(net.forward(x, labels).first, before);
}

TEST(Train, DetectsDivergence) {
	// Stacked linear layers have no dead ReLUs to stall in, so a large rate blows up.
	const Dataset ds = synth_shapes(64, 16, 3, 2);
	Network net({3, 16, 16},
			{Layer::flatten("f"), Layer::linear("a", 768, 32), Layer::linear("b", 32, 32), Layer::linear("fc", 32, 3)});
	net.initialize(1);
	TrainConfig cfg;
	cfg.learning_rate = 100;
	cfg.epochs = 20;
	EXPECT_THROW(train(net, ds, cfg), TrainingDiverged);
}

TEST(Train, LossDecreasesOverEpochs) {
	const Dataset ds = synth_shapes(240, 16, 2, 11);
	Network net = make_toy_cnn(3, 16, 2, 4);
	net.initialize(3);
	TrainConfig cfg;
	cfg.epochs = 8;
	std::size_t calls = 0;
	const TrainHistory h = train(net, ds, cfg, [&](const EpochStats& e) { EXPECT_EQ(e.epoch, ++calls); });
	EXPECT_EQ(calls, 8u);
	EXPECT_LT(h.back().loss, h.front().loss);
}

TEST(Train, ValidatesConfig) {
	const Dataset ds = synth_shapes(16, 16, 2, 1);
	Network net = make_toy_cnn(3, 16, 2, 4);
	TrainConfig cfg;
	cfg.batch_size = 0;
	EXPECT_THROW(train(net, ds, cfg), RangeError);
	cfg = TrainConfig{};
	cfg.learning_rate = -1;
	EXPECT_THROW(train(net, ds, cfg), RangeError);
}
