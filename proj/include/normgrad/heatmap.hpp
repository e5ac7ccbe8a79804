#ifndef NORMGRAD_HEATMAP_HPP_
#define NORMGRAD_HEATMAP_HPP_

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "image_io.hpp"
#include "tensor.hpp"

namespace normgrad {

enum class Interpolation { nearest, bilinear };

/**
 * Resizes an (H, W) map to a larger or equal target with corner-aligned
 * sampling: output pixel i samples source coordinate i * (H_s - 1) / (H_t - 1).
 */
inline Tensor upsample_map(const Tensor& map, std::size_t target_h, std::size_t target_w, Interpolation method) {
	if (map.rank() != 2) throw ShapeError("upsample_map expects an (H,W) map, got " + shape_string(map.shape()));
	const std::size_t sh = map.dim(0), sw = map.dim(1);
	if (target_h < sh || target_w < sw) {
		throw ShapeError("upsample_map cannot downsample " + shape_string(map.shape()) + " to (" +
				std::to_string(target_h) + "," + std::to_string(target_w) + ")");
	}
	Tensor out({target_h, target_w});
	auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
		return dst > 1 ? static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1) : 0.0;
	};
	for (std::size_t y = 0; y < target_h; ++y) {
		const double fy = coord(y, sh, target_h);
		for (std::size_t x = 0; x < target_w; ++x) {
			const double fx = coord(x, sw, target_w);
			if (method == Interpolation::nearest) {
				const auto iy = std::min(sh - 1, static_cast<std::size_t>(std::lround(fy)));
				const auto ix = std::min(sw - 1, static_cast<std::size_t>(std::lround(fx)));
				out[y * target_w + x] = map[iy * sw + ix];
				continue;
			}
			const auto y0 = std::min(sh - 1, static_cast<std::size_t>(std::floor(fy)));
			const auto x0 = std::min(sw - 1, static_cast<std::size_t>(std::floor(fx)));
			const std::size_t y1 = std::min(sh - 1, y0 + 1), x1 = std::min(sw - 1, x0 + 1);
			const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
			const double top = map[y0 * sw + x0] + tx * (map[y0 * sw + x1] - map[y0 * sw + x0]);
			const double bottom = map[y1 * sw + x0] + tx * (map[y1 * sw + x1] - map[y1 * sw + x0]);
			out[y * target_w + x] = top + ty * (bottom - top);
		}
	}
	return out;
}

/// Min-max scaling applied at export time.
struct Normalization {
	double min = 0;
	double max = 0;
	/// max == min; the map exports as all zeros.
	bool degenerate = false;
};

inline Normalization normalization_of(const Tensor& map) {
	if (map.size() == 0) return {0, 0, true};
	const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
	return {*lo, *hi, !(*hi > *lo)};
}

/// Map values scaled to [0, 1] by `norm`; all zeros when degenerate.
inline Tensor normalized(const Tensor& map, const Normalization& norm) {
	Tensor out(map.shape());
	if (norm.degenerate) return out;
	for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - norm.min) / (norm.max - norm.min);
	return out;
}

/// Grayscale PGM raster of a normalized (H, W) map.
inline Raster heatmap_raster(const Tensor& unit_map) {
	Raster r{unit_map.dim(1), unit_map.dim(0), 1, {}};
	r.pixels.resize(unit_map.size());
	for (std::size_t i = 0; i < unit_map.size(); ++i) r.pixels[i] = to_byte(unit_map[i]);
	return r;
}

/**
 * Red-tinted overlay of a normalized map on the grayscale version of `image` (1, C, H, W):
 * R = gray + m (1 - gray), G = B = gray (1 - m).
 */
inline Raster overlay_raster(const Tensor& unit_map, const Tensor& image) {
	if (image.rank() != 4 || unit_map.rank() != 2 || unit_map.dim(0) != image.dim(2) || unit_map.dim(1) != image.dim(3)) {
		throw ShapeError("overlay: map " + shape_string(unit_map.shape()) + " does not match image " +
				shape_string(image.shape()));
	}
	const std::size_t h = image.dim(2), w = image.dim(3), channels = image.dim(1);
	Raster r{w, h, 3, std::vector<std::uint8_t>(w * h * 3)};
	for (std::size_t y = 0; y < h; ++y) {
		for (std::size_t x = 0; x < w; ++x) {
			double gray = 0;
			for (std::size_t c = 0; c < channels; ++c) gray += image(0, c, y, x);
			gray = std::clamp(gray / static_cast<double>(channels), 0.0, 1.0);
			const double m = unit_map[y * w + x];
			const std::size_t at = (y * w + x) * 3;
			r.pixels[at] = to_byte(gray + m * (1.0 - gray));
			r.pixels[at + 1] = to_byte(gray * (1.0 - m));
			r.pixels[at + 2] = to_byte(gray * (1.0 - m));
		}
	}
	return r;
}

/// Raw map as read back from CSV.
struct MapCsv {
	Tensor values;
	std::string method;
	std::string tap;
};

inline std::string format_exact(double v) {
	char buf[32];
	const auto res = std::to_chars(buf, buf + sizeof buf, v);
	return std::string(buf, res.ptr);
}

/// CSV layout: "H,W,method,tap", then "<H>,<W>,<method>,<tap>", then H rows of W values.
inline void write_map_csv(const std::filesystem::path& path, const Tensor& map, const std::string& method,
		const std::string& tap) {
	if (map.rank() != 2) throw ShapeError("write_map_csv expects an (H,W) map");
	std::ofstream out(path, std::ios::trunc);
	if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
	out << "H,W,method,tap\n" << map.dim(0) << ',' << map.dim(1) << ',' << method << ',' << tap << '\n';
	for (std::size_t y = 0; y < map.dim(0); ++y) {
		for (std::size_t x = 0; x < map.dim(1); ++x) {
			if (x) out << ',';
			out << format_exact(map[y * map.dim(1) + x]);
		}
		out << '\n';
	}
	if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline MapCsv read_map_csv(const std::filesystem::path& path) {
	std::ifstream in(path);
	if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
	std::string line;
	if (!std::getline(in, line) || line != "H,W,method,tap") throw FormatError(path.string() + ": missing CSV header");
	if (!std::getline(in, line)) throw FormatError(path.string() + ": missing CSV metadata line");
	std::vector<std::string> meta;
	{
		std::stringstream ss(line);
		std::string field;
		while (std::getline(ss, field, ',')) meta.push_back(field);
	}
	if (meta.size() != 4) throw FormatError(path.string() + ": malformed CSV metadata line");
	MapCsv csv;
	std::size_t h = 0, w = 0;
	try {
		h = std::stoul(meta[0]);
		w = std::stoul(meta[1]);
	} catch (const std::exception&) {
		throw FormatError(path.string() + ": malformed CSV extents");
	}
	csv.method = meta[2];
	csv.tap = meta[3];
	csv.values = Tensor({h, w});
	for (std::size_t y = 0; y < h; ++y) {
		if (!std::getline(in, line)) throw FormatError(path.string() + ": truncated CSV");
		const char* p = line.data();
		const char* end = line.data() + line.size();
		for (std::size_t x = 0; x < w; ++x) {
			double v = 0;
			const auto res = std::from_chars(p, end, v);
			if (res.ec != std::errc()) throw FormatError(path.string() + ": malformed CSV value");
			csv.values[y * w + x] = v;
			p = res.ptr;
			if (x + 1 < w) {
				if (p == end || *p != ',') throw FormatError(path.string() + ": short CSV row");
				++p;
			}
		}
	}
	return csv;
}

struct ExportOptions {
	std::string method;
	std::string tap;
	/// (1, C, H, W) image; when given, an overlay PPM is written and the PGM uses the image resolution.
	std::optional<Tensor> overlay;
	Interpolation upsample = Interpolation::bilinear;
};

struct ExportedFiles {
	std::filesystem::path pgm, csv, meta;
	std::optional<std::filesystem::path> overlay;
	Normalization normalization;
};

/**
 * Writes <stem>.pgm (normalized grayscale), <stem>.csv (raw values at native
 * resolution), <stem>.meta (one line: normalization record) and, with an
 * overlay image, <stem>_overlay.ppm.
 */
inline ExportedFiles export_heatmap(const Tensor& map, const std::filesystem::path& stem, const ExportOptions& opts) {
	if (map.rank() != 2) throw ShapeError("export_heatmap expects an (H,W) map, got " + shape_string(map.shape()));
	map.check_finite("export_heatmap");
	ExportedFiles files;
	files.pgm = stem.string() + ".pgm";
	files.csv = stem.string() + ".csv";
	files.meta = stem.string() + ".meta";

	Tensor display = map;
	if (opts.overlay) display = upsample_map(map, opts.overlay->dim(2), opts.overlay->dim(3), opts.upsample);
	files.normalization = normalization_of(display);
	const Tensor unit = normalized(display, files.normalization);

	write_raster(files.pgm, heatmap_raster(unit));
	write_map_csv(files.csv, map, opts.method, opts.tap);
	{
		std::ofstream meta(files.meta, std::ios::trunc);
		if (!meta) throw IoError("cannot open '" + files.meta.string() + "' for writing");
		meta << "normalization min=" << format_exact(files.normalization.min)
			 << " max=" << format_exact(files.normalization.max)
			 << " degenerate=" << (files.normalization.degenerate ? 1 : 0) << " native=" << map.dim(0) << 'x'
			 << map.dim(1) << " exported=" << display.dim(0) << 'x' << display.dim(1) << '\n';
	}
	if (opts.overlay) {
		files.overlay = stem.string() + "_overlay.ppm";
		write_raster(*files.overlay, overlay_raster(unit, *opts.overlay));
	}
	return files;
}

} // namespace normgrad

#endif // NORMGRAD_HEATMAP_HPP_
