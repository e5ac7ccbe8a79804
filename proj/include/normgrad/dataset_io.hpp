#ifndef NORMGRAD_DATASET_IO_HPP_
#define NORMGRAD_DATASET_IO_HPP_

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "image_io.hpp"
#include "random.hpp"
#include "trainer.hpp"

namespace normgrad {

/*
 * Dataset directory layout:
 *
 *   <dir>/labels.txt          one "<filename> <class index>" pair per line
 *   <dir>/<filename>          binary PGM or PPM, all of the same shape
 *   <dir>/classes.txt         optional, one class name per line
 *   <dir>/masks/<filename>.pgm  optional object masks (nonzero = object)
 */
inline constexpr const char* kLabelIndexFile = "labels.txt";

inline std::string sample_file_name(std::size_t i, std::size_t channels) {
	char buf[32];
	std::snprintf(buf, sizeof buf, "img_%05zu.%s", i, channels == 1 ? "pgm" : "ppm");
	return buf;
}

inline void export_dataset(const Dataset& ds, const std::filesystem::path& dir) {
	ds.validate();
	std::error_code ec;
	std::filesystem::create_directories(dir / "masks", ec);
	if (ec) throw IoError("cannot create '" + (dir / "masks").string() + "': " + ec.message());
	std::ofstream labels(dir / kLabelIndexFile, std::ios::trunc);
	if (!labels) throw IoError("cannot write '" + (dir / kLabelIndexFile).string() + "'");
	const std::size_t h = ds.images.dim(2), w = ds.images.dim(3);
	for (std::size_t i = 0; i < ds.size(); ++i) {
		const std::string name = sample_file_name(i, ds.images.dim(1));
		save_image(dir / name, ds.images, i);
		labels << name << ' ' << ds.labels[i] << '\n';
		if (ds.masks) {
			Raster m{w, h, 1, std::vector<std::uint8_t>(w * h)};
			for (std::size_t p = 0; p < w * h; ++p) m.pixels[p] = (*ds.masks)[i * w * h + p] > 0.5 ? 255 : 0;
			write_raster(dir / "masks" / (name + ".pgm"), m);
		}
	}
	std::ofstream classes(dir / "classes.txt", std::ios::trunc);
	for (const auto& c : ds.class_names) classes << c << '\n';
}

/// Loads a dataset directory; the validation split is a seeded `val_fraction` of the samples.
inline Dataset load_dataset(const std::filesystem::path& dir, double val_fraction = 0.2, std::uint64_t seed = 1) {
	const std::filesystem::path index = dir / kLabelIndexFile;
	if (!std::filesystem::exists(index)) throw IoError("dataset label index '" + index.string() + "' not found");
	std::ifstream in(index);
	std::vector<std::string> files;
	std::vector<std::size_t> labels;
	std::string line;
	std::size_t lineno = 0;
	while (std::getline(in, line)) {
		++lineno;
		if (line.empty()) continue;
		std::istringstream is(line);
		std::string file;
		long long label = -1;
		if (!(is >> file >> label) || label < 0) {
			throw FormatError(index.string() + ":" + std::to_string(lineno) + ": expected '<filename> <class>'");
		}
		files.push_back(file);
		labels.push_back(static_cast<std::size_t>(label));
	}
	if (files.empty()) throw FormatError(index.string() + ": no samples");

	Dataset ds;
	std::vector<Tensor> images;
	bool have_masks = true;
	for (const auto& f : files) {
		images.push_back(load_image(dir / f));
		if (images.back().shape() != images.front().shape()) {
			throw ShapeError("dataset image '" + f + "' shape " + shape_string(images.back().shape()) +
					" differs from " + shape_string(images.front().shape()));
		}
		have_masks = have_masks && std::filesystem::exists(dir / "masks" / (f + ".pgm"));
	}
	const Shape& s = images.front().shape();
	ds.images = Tensor({files.size(), s[1], s[2], s[3]});
	const std::size_t stride = s[1] * s[2] * s[3];
	for (std::size_t i = 0; i < files.size(); ++i) {
		std::copy(images[i].values().begin(), images[i].values().end(), ds.images.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
	}
	if (have_masks) {
		ds.masks = Tensor({files.size(), s[2], s[3]});
		for (std::size_t i = 0; i < files.size(); ++i) {
			const Raster m = read_raster(dir / "masks" / (files[i] + ".pgm"));
			if (m.channels != 1 || m.width != s[3] || m.height != s[2]) throw ShapeError("mask for '" + files[i] + "' has the wrong shape");
			for (std::size_t p = 0; p < m.pixels.size(); ++p) (*ds.masks)[i * s[2] * s[3] + p] = m.pixels[p] ? 1.0 : 0.0;
		}
	}
	ds.labels = std::move(labels);
	const std::size_t classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
	std::ifstream names(dir / "classes.txt");
	for (std::string name; std::getline(names, name);) {
		if (!name.empty()) ds.class_names.push_back(name);
	}
	if (ds.class_names.size() < classes) {
		ds.class_names.clear();
		for (std::size_t c = 0; c < classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
	}

	std::vector<std::size_t> order(ds.size());
	for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
	Rng rng(seed);
	rng.shuffle(order);
	const auto n_val = static_cast<std::size_t>(val_fraction * static_cast<double>(ds.size()));
	ds.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
	ds.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
	std::sort(ds.val.begin(), ds.val.end());
	std::sort(ds.train.begin(), ds.train.end());
	ds.validate();
	return ds;
}

} // namespace normgrad

#endif // NORMGRAD_DATASET_IO_HPP_
