#ifndef NORMGRAD_MODEL_IO_HPP_
#define NORMGRAD_MODEL_IO_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "image_io.hpp"
#include "network.hpp"

namespace normgrad {

/*
 * Model container, version 1 (see docs/model_format.md):
 *
 *   NORMGRAD-MODEL 1\n
 *   input <C> <H> <W>\n
 *   layers <L>\n
 *   <kind> <name> <in> <out> <kernel_h> <kernel_w> <stride> <padding>\n   (L lines)
 *   params <P>\n
 *   P x 8 bytes: IEEE-754 binary64, little-endian, in Network::parameters() order
 */
inline constexpr int kModelFormatVersion = 1;

inline std::vector<std::uint8_t> encode_model(const Network& net) {
	std::ostringstream head;
	head << "NORMGRAD-MODEL " << kModelFormatVersion << '\n';
	head << "input " << net.input_shape()[0] << ' ' << net.input_shape()[1] << ' ' << net.input_shape()[2] << '\n';
	head << "layers " << net.layers().size() << '\n';
	for (const Layer& l : net.layers()) {
		if (l.name.find_first_of(" \t\r\n") != std::string::npos) {
			throw FormatError("layer name '" + l.name + "' contains whitespace and cannot be serialized");
		}
		head << layer_kind_name(l.kind) << ' ' << l.name << ' ' << l.in_channels << ' ' << l.out_channels << ' '
			 << l.window.kernel_h << ' ' << l.window.kernel_w << ' ' << l.window.stride << ' ' << l.window.padding << '\n';
	}
	const std::vector<double> theta = net.parameters();
	head << "params " << theta.size() << '\n';
	const std::string h = head.str();
	std::vector<std::uint8_t> bytes(h.begin(), h.end());
	bytes.reserve(bytes.size() + 8 * theta.size());
	for (double v : theta) {
		const auto bits = std::bit_cast<std::uint64_t>(v);
		for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
	}
	return bytes;
}

inline Network decode_model(const std::vector<std::uint8_t>& bytes, const std::string& what = "model") {
	// Header is line oriented; find the "params" line to locate the payload.
	std::size_t pos = 0;
	auto next_line = [&]() {
		const std::size_t start = pos;
		while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
		if (pos >= bytes.size()) throw FormatError(what + ": truncated header");
		return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos++));
	};
	auto fields = [&](const std::string& line, const std::string& key, std::size_t count) {
		std::istringstream is(line);
		std::string k;
		is >> k;
		if (k != key) throw FormatError(what + ": expected '" + key + "' line, got '" + line + "'");
		std::vector<std::size_t> out(count);
		for (auto& v : out) {
			if (!(is >> v)) throw FormatError(what + ": malformed '" + key + "' line");
		}
		return out;
	};

	const std::string magic = next_line();
	if (magic.rfind("NORMGRAD-MODEL ", 0) != 0) throw FormatError(what + ": not a model file");
	if (magic != "NORMGRAD-MODEL " + std::to_string(kModelFormatVersion)) {
		throw FormatError(what + ": unsupported model version '" + magic.substr(15) + "'");
	}
	const auto input = fields(next_line(), "input", 3);
	const std::size_t count = fields(next_line(), "layers", 1)[0];
	std::vector<Layer> layers;
	for (std::size_t i = 0; i < count; ++i) {
		std::istringstream is(next_line());
		std::string kind_name, name;
		std::size_t in = 0, out = 0, kh = 0, kw = 0, stride = 0, padding = 0;
		if (!(is >> kind_name >> name >> in >> out >> kh >> kw >> stride >> padding)) {
			throw FormatError(what + ": malformed layer line " + std::to_string(i));
		}
		const auto kind = parse_layer_kind(kind_name);
		if (!kind) throw FormatError(what + ": unknown layer kind '" + kind_name + "'");
		Layer l;
		switch (*kind) {
		case LayerKind::conv2d:
			if (kh != kw) throw FormatError(what + ": non-square kernels are not supported");
			l = Layer::conv2d(name, in, out, kh, stride, padding);
			break;
		case LayerKind::linear: l = Layer::linear(name, in, out); break;
		case LayerKind::maxpool: l = Layer::maxpool(name, kh, stride); break;
		case LayerKind::avgpool: l = Layer::avgpool(name, kh, stride); break;
		case LayerKind::relu: l = Layer::relu(name); break;
		case LayerKind::flatten: l = Layer::flatten(name); break;
		case LayerKind::global_avg_pool: l = Layer::global_avg_pool(name); break;
		}
		layers.push_back(std::move(l));
	}
	Network net({input[0], input[1], input[2]}, std::move(layers));
	const std::size_t params = fields(next_line(), "params", 1)[0];
	if (params != net.parameter_count()) {
		throw FormatError(what + ": parameter count " + std::to_string(params) + " does not match architecture (" +
				std::to_string(net.parameter_count()) + ")");
	}
	if (bytes.size() - pos != 8 * params) {
		throw FormatError(what + ": payload holds " + std::to_string(bytes.size() - pos) + " bytes, expected " +
				std::to_string(8 * params));
	}
	std::vector<double> theta(params);
	for (std::size_t i = 0; i < params; ++i) {
		std::uint64_t bits = 0;
		for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[pos + 8 * i + static_cast<std::size_t>(b)]) << (8 * b);
		theta[i] = std::bit_cast<double>(bits);
	}
	net.set_parameters(theta);
	return net;
}

inline void save_model(const std::filesystem::path& path, const Network& net) {
	detail::write_file_bytes(path, {}, encode_model(net));
}

inline Network load_model(const std::filesystem::path& path) {
	return decode_model(detail::read_file_bytes(path), path.string());
}

} // namespace normgrad

#endif // NORMGRAD_MODEL_IO_HPP_
