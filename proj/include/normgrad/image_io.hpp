#ifndef NORMGRAD_IMAGE_IO_HPP_
#define NORMGRAD_IMAGE_IO_HPP_

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace normgrad {

/// 8-bit interleaved raster as stored in a binary PGM (1 channel) or PPM (3 channels).
struct Raster {
	std::size_t width = 0;
	std::size_t height = 0;
	std::size_t channels = 1;
	std::vector<std::uint8_t> pixels;

	friend bool operator==(const Raster&, const Raster&) = default;
};

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
	std::ifstream in(path, std::ios::binary);
	if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
	return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& header,
		const std::vector<std::uint8_t>& payload) {
	std::ofstream out(path, std::ios::binary | std::ios::trunc);
	if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
	out.write(header.data(), static_cast<std::streamsize>(header.size()));
	out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
	if (!out) throw IoError("failed writing '" + path.string() + "'");
}

/// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string pnm_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos, const std::string& what) {
	while (pos < bytes.size()) {
		if (bytes[pos] == '#') {
			while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
		} else if (std::isspace(bytes[pos])) {
			++pos;
		} else {
			break;
		}
	}
	std::string tok;
	while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') tok.push_back(static_cast<char>(bytes[pos++]));
	if (tok.empty()) throw FormatError(what + ": truncated header");
	return tok;
}

inline std::size_t pnm_number(const std::string& tok, const std::string& what) {
	if (tok.empty() || tok.size() > 9 || tok.find_first_not_of("0123456789") != std::string::npos) {
		throw FormatError(what + ": malformed header field '" + tok + "'");
	}
	return static_cast<std::size_t>(std::stoul(tok));
}

} // namespace detail

/// Parses binary PGM (P5) or PPM (P6) with maxval 255.
inline Raster decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& what = "image") {
	std::size_t pos = 0;
	const std::string magic = detail::pnm_token(bytes, pos, what);
	Raster r;
	if (magic == "P5") {
		r.channels = 1;
	} else if (magic == "P6") {
		r.channels = 3;
	} else {
		throw FormatError(what + ": unsupported magic '" + magic + "' (expected P5 or P6)");
	}
	r.width = detail::pnm_number(detail::pnm_token(bytes, pos, what), what);
	r.height = detail::pnm_number(detail::pnm_token(bytes, pos, what), what);
	const std::size_t maxval = detail::pnm_number(detail::pnm_token(bytes, pos, what), what);
	if (maxval != 255) throw FormatError(what + ": unsupported maxval " + std::to_string(maxval) + " (only 255)");
	if (r.width == 0 || r.height == 0) throw FormatError(what + ": zero image extent");
	if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(what + ": truncated header");
	++pos;
	const std::size_t need = r.width * r.height * r.channels;
	if (bytes.size() - pos < need) {
		throw FormatError(what + ": truncated payload (" + std::to_string(bytes.size() - pos) + " of " +
				std::to_string(need) + " bytes)");
	}
	r.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
			bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
	return r;
}

/// Canonical header "P5\n<W> <H>\n255\n" (or P6) followed by the payload.
inline std::string pnm_header(const Raster& r) {
	return std::string(r.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(r.width) + " " +
			std::to_string(r.height) + "\n255\n";
}

inline Raster read_raster(const std::filesystem::path& path) {
	return decode_pnm(detail::read_file_bytes(path), path.string());
}

inline void write_raster(const std::filesystem::path& path, const Raster& r) {
	if (r.channels != 1 && r.channels != 3) throw FormatError("rasters must have 1 or 3 channels");
	if (r.pixels.size() != r.width * r.height * r.channels) throw ShapeError("raster payload size mismatch");
	detail::write_file_bytes(path, pnm_header(r), r.pixels);
}

/// (1, C, H, W) tensor with values byte / 255.
inline Tensor raster_to_tensor(const Raster& r) {
	Tensor t({1, r.channels, r.height, r.width});
	for (std::size_t y = 0; y < r.height; ++y) {
		for (std::size_t x = 0; x < r.width; ++x) {
			for (std::size_t c = 0; c < r.channels; ++c) {
				t(0, c, y, x) = r.pixels[(y * r.width + x) * r.channels + c] / 255.0;
			}
		}
	}
	return t;
}

inline std::uint8_t to_byte(double v) {
	const double s = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
	return static_cast<std::uint8_t>(s);
}

/// Sample n of a (N, C, H, W) tensor with C in {1, 3}, values clamped to [0, 1].
inline Raster tensor_to_raster(const Tensor& t, std::size_t n = 0) {
	if (t.rank() != 4 || (t.dim(1) != 1 && t.dim(1) != 3)) {
		throw ShapeError("image tensors must be (N,1,H,W) or (N,3,H,W), got " + shape_string(t.shape()));
	}
	Raster r{t.dim(3), t.dim(2), t.dim(1), {}};
	r.pixels.resize(r.width * r.height * r.channels);
	for (std::size_t y = 0; y < r.height; ++y) {
		for (std::size_t x = 0; x < r.width; ++x) {
			for (std::size_t c = 0; c < r.channels; ++c) {
				r.pixels[(y * r.width + x) * r.channels + c] = to_byte(t(n, c, y, x));
			}
		}
	}
	return r;
}

inline Tensor load_image(const std::filesystem::path& path) { return raster_to_tensor(read_raster(path)); }

inline void save_image(const std::filesystem::path& path, const Tensor& image, std::size_t n = 0) {
	write_raster(path, tensor_to_raster(image, n));
}

} // namespace normgrad

#endif // NORMGRAD_IMAGE_IO_HPP_
