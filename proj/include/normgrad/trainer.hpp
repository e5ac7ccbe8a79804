#ifndef NORMGRAD_TRAINER_HPP_
#define NORMGRAD_TRAINER_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "network.hpp"
#include "random.hpp"

namespace normgrad {

/// Labelled images with an optional per-pixel object mask and a train/validation split.
struct Dataset {
	Tensor images;                      // (N, C, H, W), values in [0, 1]
	std::vector<std::size_t> labels;    // class indices in [0, class_names.size())
	std::optional<Tensor> masks;        // (N, H, W), 1 inside the object
	std::vector<std::size_t> train;
	std::vector<std::size_t> val;
	std::vector<std::string> class_names;

	std::size_t size() const { return labels.size(); }
	std::size_t num_classes() const { return class_names.size(); }

	void validate() const {
		if (images.rank() != 4 || images.dim(0) != labels.size()) {
			throw ShapeError("dataset images " + shape_string(images.shape()) + " do not match " +
					std::to_string(labels.size()) + " labels");
		}
		images.check_finite("dataset images");
		for (std::size_t y : labels) {
			if (y >= num_classes()) throw RangeError("dataset label " + std::to_string(y) + " out of range");
		}
		if (masks && (masks->rank() != 3 || masks->dim(0) != size() || masks->dim(1) != images.dim(2) ||
							 masks->dim(2) != images.dim(3))) {
			throw ShapeError("dataset masks " + shape_string(masks->shape()) + " do not match images");
		}
		std::set<std::size_t> seen;
		for (const auto* split : {&train, &val}) {
			for (std::size_t i : *split) {
				if (i >= size()) throw RangeError("split index " + std::to_string(i) + " out of range");
				if (!seen.insert(i).second) throw RangeError("split index " + std::to_string(i) + " used twice");
			}
		}
	}
};

inline const std::vector<std::string>& synth_shape_names() {
	static const std::vector<std::string> names{"square", "disk", "triangle", "cross"};
	return names;
}

/**
 * One random shape per image on a uniform-noise background.
 *
 * Sample i has class i % classes, so the class histogram is balanced within
 * one. Shapes are fully inside the image; their pixels form the mask.
 * A `val_fraction` of the samples, chosen by the seeded permutation, forms
 * the validation split.
 */
inline Dataset synth_shapes(std::size_t count, std::size_t size, std::size_t classes, std::uint64_t seed,
		double val_fraction = 0.2) {
	if (size < 16) throw ShapeError("synth_shapes needs images of at least 16 pixels");
	if (classes < 2 || classes > synth_shape_names().size()) {
		throw RangeError("synth_shapes supports 2 to " + std::to_string(synth_shape_names().size()) + " classes");
	}
	if (count == 0) throw RangeError("synth_shapes needs at least one sample");
	Rng rng(seed);
	Dataset ds;
	ds.class_names.assign(synth_shape_names().begin(), synth_shape_names().begin() + static_cast<std::ptrdiff_t>(classes));
	ds.images = Tensor({count, 3, size, size});
	ds.masks = Tensor({count, size, size});
	ds.labels.resize(count);
	const double s = static_cast<double>(size);
	for (std::size_t n = 0; n < count; ++n) {
		const std::size_t label = n % classes;
		ds.labels[n] = label;
		const double r = rng.uniform(0.18 * s, 0.32 * s);
		const double cx = rng.uniform(r + 1.0, s - r - 1.0);
		const double cy = rng.uniform(r + 1.0, s - r - 1.0);
		double color[3];
		for (double& c : color) c = rng.uniform(0.6, 1.0);
		for (std::size_t y = 0; y < size; ++y) {
			for (std::size_t x = 0; x < size; ++x) {
				const double dx = static_cast<double>(x) + 0.5 - cx;
				const double dy = static_cast<double>(y) + 0.5 - cy;
				bool inside = false;
				switch (label) {
				case 0: inside = std::abs(dx) <= r && std::abs(dy) <= r; break;
				case 1: inside = dx * dx + dy * dy <= r * r; break;
				case 2: inside = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0; break;
				default:
					inside = (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
					break;
				}
				(*ds.masks)[(n * size + y) * size + x] = inside ? 1.0 : 0.0;
				for (std::size_t c = 0; c < 3; ++c) {
					const double noise = rng.uniform(0.0, 0.35);
					ds.images(n, c, y, x) = inside ? color[c] : noise;
				}
			}
		}
	}
	std::vector<std::size_t> order(count);
	for (std::size_t i = 0; i < count; ++i) order[i] = i;
	rng.shuffle(order);
	const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(count)));
	ds.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
	ds.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
	std::sort(ds.val.begin(), ds.val.end());
	std::sort(ds.train.begin(), ds.train.end());
	return ds;
}

struct TrainConfig {
	double learning_rate = 0.05;
	std::size_t batch_size = 16;
	std::size_t epochs = 20;
	std::uint64_t seed = 1;
	bool shuffle = true;

	void validate() const {
		if (learning_rate < 0.0 || !std::isfinite(learning_rate)) throw RangeError("learning rate must be >= 0");
		if (batch_size == 0) throw RangeError("batch size must be positive");
		if (epochs == 0) throw RangeError("epochs must be positive");
	}
};

struct EpochStats {
	std::size_t epoch = 0;
	double loss = 0;
	double train_accuracy = 0;
	double val_accuracy = 0;
};

using TrainHistory = std::vector<EpochStats>;

/// Raised when the training loss becomes non-finite.
class TrainingDiverged : public NumericError {
public:
	using NumericError::NumericError;
};

/// Fraction of `indices` the network classifies correctly, evaluated in chunks.
inline double evaluate_accuracy(const Network& net, const Tensor& images, std::span<const std::size_t> indices,
		std::span<const std::size_t> labels, std::size_t chunk = 64) {
	if (indices.empty()) return 0.0;
	std::size_t correct = 0;
	for (std::size_t start = 0; start < indices.size(); start += chunk) {
		const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
		const std::vector<std::size_t> pred = net.predict(batch_gather(images, part));
		for (std::size_t k = 0; k < part.size(); ++k) correct += pred[k] == labels[part[k]] ? 1 : 0;
	}
	return static_cast<double>(correct) / static_cast<double>(indices.size());
}

/// Plain mini-batch SGD on mean cross-entropy; deterministic for a fixed seed.
inline TrainHistory train(Network& net, const Dataset& ds, const TrainConfig& cfg,
		const std::function<void(const EpochStats&)>& on_epoch = {}) {
	cfg.validate();
	ds.validate();
	if (ds.train.empty()) throw RangeError("training split is empty");
	Rng rng(cfg.seed);
	std::vector<std::size_t> order = ds.train;
	TrainHistory history;
	for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
		if (cfg.shuffle) rng.shuffle(order);
		double loss_sum = 0.0;
		std::size_t correct = 0;
		for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
			const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
			std::vector<std::size_t> labels;
			for (std::size_t i : idx) labels.push_back(ds.labels[i]);
			const ForwardCache<double> cache = net.forward(batch_gather(ds.images, idx));
			const LossResult<double> lr = cross_entropy(cache.logits(), labels);
			if (!std::isfinite(lr.loss)) {
				throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", batch starting at " +
						std::to_string(start) + ": loss = " + std::to_string(lr.loss) + " (try a smaller learning rate)");
			}
			loss_sum += lr.loss * static_cast<double>(idx.size());
			const std::vector<std::size_t> pred = Network::argmax_rows(cache.logits());
			for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == labels[k] ? 1 : 0;
			const BackwardResult<double> br = net.backward(cache, lr.seed);
			for (std::size_t i = 0; i < net.layers().size(); ++i) {
				Layer& layer = net.layer(i);
				if (!layer.has_params()) continue;
				for (std::size_t j = 0; j < layer.weight.size(); ++j) {
					layer.weight[j] -= cfg.learning_rate * br.param_grads[i].weight[j];
				}
				for (std::size_t j = 0; j < layer.bias.size(); ++j) {
					layer.bias[j] -= cfg.learning_rate * br.param_grads[i].bias[j];
				}
				if (!layer.weight.all_finite() || !layer.bias.all_finite()) {
					throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ": parameters of '" +
							layer.name + "' are no longer finite (try a smaller learning rate)");
				}
			}
		}
		EpochStats stats;
		stats.epoch = epoch;
		stats.loss = loss_sum / static_cast<double>(order.size());
		stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
		stats.val_accuracy = evaluate_accuracy(net, ds.images, ds.val, ds.labels);
		history.push_back(stats);
		if (on_epoch) on_epoch(stats);
	}
	return history;
}

} // namespace normgrad

#endif // NORMGRAD_TRAINER_HPP_
