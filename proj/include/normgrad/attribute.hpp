#ifndef NORMGRAD_ATTRIBUTE_HPP_
#define NORMGRAD_ATTRIBUTE_HPP_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "order1.hpp"
#include "saliency.hpp"

namespace normgrad {

struct AttributionRequest {
	Method method = Method::normgrad0;
	std::vector<std::string> taps;
	/// Class every sample is attributed against; falls back to `labels`, then to the prediction.
	std::optional<std::size_t> target_class;
	std::vector<std::size_t> labels;
	/// Order-1 settings; mode is derived from the method.
	Order1Config order1;
};

struct AttributionResult {
	/// maps[t] holds every sample for taps[t].
	std::vector<SaliencyMap> maps;
	std::vector<std::size_t> targets;
	std::uint64_t forward_passes = 0;
	std::uint64_t backward_passes = 0;
};

/**
 * Computes one map per requested tap for a batch of images.
 *
 * Order-0 methods and Grad-CAM share a single forward/backward pass for the
 * whole batch and every tap; the seed is rescaled by the batch size so each
 * sample's map equals its single-image map. Order-1 methods run four passes
 * per image and tap. For normgrad0-general the tap must be the output of a
 * convolution; its map is at the conv input resolution.
 */
inline AttributionResult attribute(const Network& net, const Tensor& x, const AttributionRequest& req) {
	if (req.taps.empty()) throw RangeError("attribute: no taps requested");
	if (x.rank() != 4 || x.dim(0) == 0) throw ShapeError("attribute: expected a (N,C,H,W) batch");
	const std::size_t batch = x.dim(0);
	std::vector<std::size_t> positions;
	for (const auto& tap : req.taps) {
		positions.push_back(net.tap_position(tap));
		if (net.tap_shape(positions.back()).size() != 3) {
			throw ShapeError("tap '" + tap + "' is not spatial; saliency needs a (C,H,W) activation");
		}
		if (req.method == Method::normgrad0_general &&
				(positions.back() == 0 || net.layer(positions.back() - 1).kind != LayerKind::conv2d)) {
			throw RangeError("normgrad0-general needs the tap after a conv2d layer, got '" + tap + "'");
		}
	}
	if (req.target_class && *req.target_class >= net.num_classes()) {
		throw RangeError("class " + std::to_string(*req.target_class) + " out of range for " +
				std::to_string(net.num_classes()) + " classes");
	}
	if (!req.labels.empty() && req.labels.size() != batch) throw ShapeError("attribute: one label per sample required");

	const std::uint64_t fwd0 = net.counter().forward, bwd0 = net.counter().backward;
	AttributionResult result;
	const bool order1 = req.method == Method::normgrad1 || req.method == Method::normgrad1_adv;

	if (!order1) {
		const ForwardCache<double> cache = net.forward(x);
		if (req.target_class) {
			if (net.num_classes() < 2) throw RangeError("class targeting needs at least 2 classes");
			result.targets.assign(batch, *req.target_class);
		} else if (!req.labels.empty()) {
			result.targets = req.labels;
		} else {
			result.targets = Network::argmax_rows(cache.logits());
		}
		const LossResult<double> lr = cross_entropy(cache.logits(), result.targets);
		std::vector<std::string> taps = req.taps;
		if (req.method == Method::normgrad0_general) {
			for (std::size_t p : positions) taps.push_back(net.tap_name(p - 1));
		}
		const BackwardResult<double> br = net.backward(cache, scaled(lr.seed, static_cast<double>(batch)), taps);
		for (std::size_t t = 0; t < req.taps.size(); ++t) {
			const TapCapture& cap = br.captures[t];
			SaliencyMap map;
			switch (req.method) {
			case Method::gradcam: map = gradcam(cap); break;
			case Method::normgrad0_general: {
				const Layer& conv = net.layer(positions[t] - 1);
				map = normgrad_general(br.captures[req.taps.size() + t].activation, cap.grad, conv.window, cap.tap);
				break;
			}
			default: map = normgrad_identity_trick(cap); break;
			}
			map.method = req.method;
			result.maps.push_back(std::move(map));
		}
	} else {
		Order1Config cfg = req.order1;
		cfg.mode = req.method == Method::normgrad1 ? Order1Mode::training : Order1Mode::adversarial;
		for (std::size_t t = 0; t < req.taps.size(); ++t) {
			SaliencyMap combined;
			combined.tap = req.taps[t];
			combined.method = req.method;
			for (std::size_t n = 0; n < batch; ++n) {
				std::vector<std::size_t> labels;
				if (req.target_class) {
					labels = {*req.target_class};
				} else if (!req.labels.empty()) {
					labels = {req.labels[n]};
				}
				Order1Result<double> r = order1_map(net, batch_slice(x, n), labels, req.taps[t], cfg);
				if (n == 0) {
					combined.values = Tensor({batch, r.map.height(), r.map.width()});
					combined.meta = r.map.meta;
				}
				combined.meta["fd_step[" + std::to_string(n) + "]"] = r.components.h;
				std::copy(r.map.values.values().begin(), r.map.values.values().end(),
						combined.values.data().begin() + static_cast<std::ptrdiff_t>(n * r.map.values.size()));
				if (t == 0) result.targets.push_back(r.target);
			}
			result.maps.push_back(std::move(combined));
		}
	}
	result.forward_passes = net.counter().forward - fwd0;
	result.backward_passes = net.counter().backward - bwd0;
	return result;
}

} // namespace normgrad

#endif // NORMGRAD_ATTRIBUTE_HPP_
