#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "normgrad.hpp"
#include "normgrad/verify.hpp"

namespace fs = std::filesystem;
using namespace normgrad;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

struct SynthSpec {
	std::size_t count = 0, size = 0, classes = 0;
};

// "shapes:COUNT:SIZE:CLASSES"
SynthSpec parse_synth(const std::string& text) {
	std::vector<std::string> parts;
	std::size_t start = 0;
	for (std::size_t i = 0; i <= text.size(); ++i) {
		if (i == text.size() || text[i] == ':') {
			parts.push_back(text.substr(start, i - start));
			start = i + 1;
		}
	}
	if (parts.size() != 4 || parts[0] != "shapes") {
		throw UsageError("--synth expects shapes:COUNT:SIZE:CLASSES, got '" + text + "'");
	}
	std::size_t v[3] = {};
	for (int k = 0; k < 3; ++k) {
		const std::string& p = parts[static_cast<std::size_t>(k) + 1];
		const auto res = std::from_chars(p.data(), p.data() + p.size(), v[k]);
		if (res.ec != std::errc{} || res.ptr != p.data() + p.size() || v[k] == 0) {
			throw UsageError("--synth field '" + p + "' is not a positive integer");
		}
	}
	return {v[0], v[1], v[2]};
}

fs::path resolve(const std::string& out_dir, const std::string& path) {
	const fs::path p(path);
	return p.is_absolute() ? p : fs::path(out_dir) / p;
}

void ensure_parent(const fs::path& p) {
	if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string file_token(const std::string& tap) {
	std::string s = tap;
	for (char& c : s)
		if (c == ':' || c == '/') c = '-';
	return s;
}

std::string dims(const Shape& s) {
	std::string out;
	for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
	return out;
}

// TOML-style echo of every option of the chosen subcommand, defaults included; `--config FILE` replays it.
void echo_config(const CLI::App& sub, bool verbose) {
	std::cout << "# config\nverbose=" << (verbose ? "true" : "false") << "\n[" << sub.get_name() << "]\n"
			  << sub.config_to_str(true, false) << "# end config\n";
}

struct TrainArgs {
	std::string synth, data, out = "model.bin", history, out_dir = ".";
	std::size_t epochs = 20, batch_size = 16, width = 8;
	double lr = 0.05, val_fraction = 0.2;
	std::uint64_t seed = 1;
};

int cmd_train(const TrainArgs& a, bool verbose) {
	if (a.synth.empty() == a.data.empty()) throw UsageError("train needs exactly one of --synth or --data");
	Dataset ds;
	if (!a.synth.empty()) {
		const SynthSpec s = parse_synth(a.synth);
		ds = synth_shapes(s.count, s.size, s.classes, a.seed, a.val_fraction);
	} else {
		ds = load_dataset(a.data, a.val_fraction, a.seed);
	}
	if (ds.images.dim(2) != ds.images.dim(3)) throw UsageError("train needs square images");
	Network net = make_toy_cnn(ds.images.dim(1), ds.images.dim(2), ds.num_classes(), a.width);
	net.initialize(a.seed);

	TrainConfig cfg;
	cfg.learning_rate = a.lr;
	cfg.batch_size = a.batch_size;
	cfg.epochs = a.epochs;
	cfg.seed = a.seed;
	const TrainHistory history = train(net, ds, cfg, [&](const EpochStats& e) {
		if (verbose || e.epoch == cfg.epochs) {
			std::printf("epoch %zu/%zu loss=%.6f train_acc=%.4f val_acc=%.4f\n", e.epoch, cfg.epochs, e.loss,
					e.train_accuracy, e.val_accuracy);
			std::fflush(stdout);
		}
	});

	const fs::path model_path = resolve(a.out_dir, a.out);
	fs::path history_path = a.history.empty() ? fs::path(model_path).replace_extension(".history.csv") : resolve(a.out_dir, a.history);
	ensure_parent(model_path);
	ensure_parent(history_path);
	save_model(model_path, net);
	std::ofstream h(history_path, std::ios::trunc);
	if (!h) throw IoError("cannot write '" + history_path.string() + "'");
	h << "epoch,loss,train_accuracy,val_accuracy\n";
	for (const auto& e : history) {
		h << e.epoch << ',' << format_exact(e.loss) << ',' << format_exact(e.train_accuracy) << ','
		  << format_exact(e.val_accuracy) << '\n';
	}
	std::printf("model: %s\nhistory: %s\n", model_path.string().c_str(), history_path.string().c_str());
	return kExitOk;
}

struct AttributeArgs {
	std::string model, image, data, out_dir = "normgrad_out", fd_step = "rule", form = "factorized",
			upsample = "bilinear";
	std::vector<std::size_t> indices;
	std::vector<std::string> methods{"normgrad0"}, taps;
	std::optional<std::size_t> target_class;
	double epsilon = 0.0005, fd_scale = 0.5;
	bool no_overlay = false;
};

int cmd_attribute(const AttributeArgs& a, bool verbose) {
	if (a.image.empty() == a.data.empty()) throw UsageError("attribute needs exactly one of --image or --data");
	if (!a.data.empty() && a.indices.empty()) throw UsageError("--data needs at least one --index");
	if (!a.image.empty() && !a.indices.empty()) throw UsageError("--index applies to --data only");
	const Network net = load_model(a.model);

	Tensor x;
	std::vector<std::size_t> ids, labels;
	if (!a.image.empty()) {
		x = load_image(a.image);
		ids = {0};
	} else {
		const Dataset ds = load_dataset(a.data);
		for (std::size_t i : a.indices) {
			if (i >= ds.size()) {
				throw RangeError("dataset index " + std::to_string(i) + " out of range for " + std::to_string(ds.size()) +
						" samples");
			}
			labels.push_back(ds.labels[i]);
		}
		x = batch_gather(ds.images, a.indices);
		ids = a.indices;
	}

	Order1Config o1;
	o1.epsilon = a.epsilon;
	o1.fd_step.scale = a.fd_scale;
	if (a.fd_step != "rule") {
		double h = 0;
		const auto res = std::from_chars(a.fd_step.data(), a.fd_step.data() + a.fd_step.size(), h);
		if (res.ec != std::errc{} || res.ptr != a.fd_step.data() + a.fd_step.size()) {
			throw UsageError("--fd-step must be 'rule' or a positive number, got '" + a.fd_step + "'");
		}
		o1.fd_step.fixed = h;
	}
	o1.form = a.form == "exact" ? Order1Form::exact : Order1Form::factorized;
	const Interpolation interp = a.upsample == "nearest" ? Interpolation::nearest : Interpolation::bilinear;
	const std::string last_spatial = [&] {
		std::string last;
		for (std::size_t p = 0; p < net.tap_count(); ++p)
			if (net.tap_shape(p).size() == 3) last = net.tap_name(p);
		return last;
	}();

	const fs::path out_dir(a.out_dir);
	fs::create_directories(out_dir);
	for (const std::string& method_str : a.methods) {
		const Method method = *parse_method(method_str);
		AttributionRequest req{method, a.taps, a.target_class, labels, o1};
		const AttributionResult r = attribute(net, x, req);
		if (verbose) {
			std::printf("passes method=%s taps=%zu samples=%zu forward=%llu backward=%llu\n", method_str.c_str(),
					a.taps.size(), ids.size(), static_cast<unsigned long long>(r.forward_passes),
					static_cast<unsigned long long>(r.backward_passes));
		}
		for (std::size_t t = 0; t < a.taps.size(); ++t) {
			const SaliencyMap& m = r.maps[t];
			if (verbose && method == Method::gradcam && a.taps[t] != last_spatial) {
				std::printf("note: gradcam at '%s' is expected to be coarse away from the last spatial tap '%s'\n",
						a.taps[t].c_str(), last_spatial.c_str());
			}
			for (std::size_t n = 0; n < ids.size(); ++n) {
				const Tensor map = batch_slice(m.values, n).reshaped({m.height(), m.width()});
				const fs::path stem = out_dir / (method_str + "_" + file_token(a.taps[t]) + "_" + std::to_string(ids[n]));
				ExportOptions opts{method_str, a.taps[t], std::nullopt, interp};
				if (!a.no_overlay) opts.overlay = batch_slice(x, n);
				const ExportedFiles f = export_heatmap(map, stem, opts);
				std::printf("wrote %s target=%zu native=%zux%zu\n", f.csv.string().c_str(), r.targets[n], m.height(),
						m.width());
				if (verbose) {
					const auto h = m.meta.find("fd_step[" + std::to_string(n) + "]");
					if (h != m.meta.end()) std::printf("fd_step sample=%zu h=%.17g\n", ids[n], h->second);
				}
			}
		}
	}
	return kExitOk;
}

int cmd_verify(std::uint64_t seed, const std::vector<std::string>& only) {
	const std::vector<std::string>& suites = only.empty() ? verify::suite_names() : only;
	std::size_t passed = 0, total = 0;
	for (const std::string& suite : suites) {
		for (const verify::Check& c : verify::run_suite(suite, seed)) {
			++total;
			passed += c.passed;
			std::printf("%s %-14s %-58s measured=%.3e tolerance=%s%.1e\n", c.passed ? "PASS" : "FAIL", c.suite.c_str(),
					c.property.c_str(), c.measured, c.at_least ? ">=" : "<", c.tolerance);
		}
	}
	std::printf("%zu/%zu checks passed (seed %llu)\n", passed, total, static_cast<unsigned long long>(seed));
	return passed == total ? kExitOk : kExitVerifyFailed;
}

int cmd_list_taps(const std::string& model) {
	const Network net = load_model(model);
	for (std::size_t p = 0; p < net.tap_count(); ++p) {
		const Shape& s = net.tap_shape(p);
		std::printf("%-16s %-10s%s\n", net.tap_name(p).c_str(), dims(s).c_str(), s.size() == 3 ? "" : " (not spatial)");
	}
	return kExitOk;
}

int cmd_export_dataset(const std::string& synth, std::uint64_t seed, double val_fraction, const std::string& out_dir,
		const std::string& out) {
	const SynthSpec s = parse_synth(synth);
	const Dataset ds = synth_shapes(s.count, s.size, s.classes, seed, val_fraction);
	const fs::path dir = resolve(out_dir, out);
	export_dataset(ds, dir);
	std::printf("dataset: %s (%zu samples)\n", dir.string().c_str(), ds.size());
	return kExitOk;
}

std::vector<std::string> method_names() {
	std::vector<std::string> out;
	for (Method m : {Method::normgrad0, Method::normgrad0_general, Method::normgrad1, Method::normgrad1_adv, Method::gradcam})
		out.emplace_back(method_name(m));
	return out;
}

} // namespace

int main(int argc, char** argv) {
	CLI::App app{"NormGrad saliency and Grad-CAM on small convolutional networks"};
	app.set_config("--config", "", "Read options from a config file (the echoed config format)");
	app.require_subcommand(1, 1);
	bool verbose = false;
	app.add_flag("-v,--verbose", verbose, "Verbose output (per-epoch lines, pass counts)");
	app.fallthrough();

	auto out_dir_option = [](CLI::App* sub, std::string& target, const std::string& help) {
		sub->add_option("--out-dir", target, help)->envname("NORMGRAD_OUT_DIR")->capture_default_str();
	};

	TrainArgs ta;
	CLI::App* train_cmd = app.add_subcommand("train", "Train the toy CNN and write the model and a history CSV");
	train_cmd->add_option("--synth", ta.synth, "Synthetic dataset shapes:COUNT:SIZE:CLASSES");
	train_cmd->add_option("--data", ta.data, "Dataset directory written by export-dataset");
	train_cmd->add_option("--epochs", ta.epochs)->capture_default_str()->check(CLI::PositiveNumber);
	train_cmd->add_option("--lr", ta.lr, "SGD learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
	train_cmd->add_option("--batch-size", ta.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
	train_cmd->add_option("--width", ta.width, "Channels of the first conv")->capture_default_str()->check(CLI::PositiveNumber);
	train_cmd->add_option("--val-fraction", ta.val_fraction)->capture_default_str()->check(CLI::Range(0.0, 0.9));
	train_cmd->add_option("--seed", ta.seed, "Seed for data, initialization and shuffling")->capture_default_str();
	train_cmd->add_option("--out", ta.out, "Model path (relative paths resolve against --out-dir)")->capture_default_str();
	train_cmd->add_option("--history", ta.history, "History CSV path; default is the model path with .history.csv")
			->capture_default_str();
	out_dir_option(train_cmd, ta.out_dir, "Base directory for relative output paths");

	AttributeArgs aa;
	CLI::App* attr_cmd = app.add_subcommand("attribute", "Compute saliency maps and export heatmaps and CSVs");
	attr_cmd->add_option("--model", aa.model)->required();
	attr_cmd->add_option("--image", aa.image, "PGM/PPM image");
	attr_cmd->add_option("--data", aa.data, "Dataset directory");
	attr_cmd->add_option("--index", aa.indices, "Dataset sample index (repeatable)");
	attr_cmd->add_option("--method", aa.methods, "Saliency method (repeatable)")
			->capture_default_str()
			->check(CLI::IsMember(method_names()));
	attr_cmd->add_option("--tap", aa.taps, "Tap name after:<layer> or input (repeatable)")->required();
	attr_cmd->add_option("--class", aa.target_class, "Target class; default is the label, else the prediction");
	attr_cmd->add_option("--epsilon", aa.epsilon, "Order-1 inner learning rate")->capture_default_str();
	attr_cmd->add_option("--fd-step", aa.fd_step, "Order-1 finite-difference step: 'rule' or a fixed h")->capture_default_str();
	attr_cmd->add_option("--fd-scale", aa.fd_scale, "Numerator of the step rule h = scale / ||grad||")->capture_default_str();
	attr_cmd->add_option("--form", aa.form, "Order-1 form")->capture_default_str()->check(CLI::IsMember({"factorized", "exact"}));
	attr_cmd->add_option("--upsample", aa.upsample, "Heatmap upsampling")
			->capture_default_str()
			->check(CLI::IsMember({"bilinear", "nearest"}));
	attr_cmd->add_flag("--no-overlay", aa.no_overlay, "Skip the red overlay PPM");
	out_dir_option(attr_cmd, aa.out_dir, "Output directory");

	std::uint64_t verify_seed = 1;
	std::vector<std::string> only;
	CLI::App* verify_cmd = app.add_subcommand("verify", "Run the oracle suites; exit 1 if any property fails");
	verify_cmd->add_option("--seed", verify_seed)->capture_default_str();
	verify_cmd->add_option("--only", only, "Restrict to a suite (repeatable)")->check(CLI::IsMember(verify::suite_names()));

	std::string taps_model;
	CLI::App* taps_cmd = app.add_subcommand("list-taps", "Print every valid tap of a model with its shape");
	taps_cmd->add_option("--model", taps_model)->required();

	std::string ds_synth, ds_out = "dataset", ds_out_dir = ".";
	std::uint64_t ds_seed = 1;
	double ds_val = 0.2;
	CLI::App* ds_cmd = app.add_subcommand("export-dataset", "Write a synthetic dataset as PGM/PPM files with labels");
	ds_cmd->add_option("--synth", ds_synth, "shapes:COUNT:SIZE:CLASSES")->required();
	ds_cmd->add_option("--seed", ds_seed)->capture_default_str();
	ds_cmd->add_option("--val-fraction", ds_val)->capture_default_str()->check(CLI::Range(0.0, 0.9));
	ds_cmd->add_option("--out", ds_out, "Dataset directory")->capture_default_str();
	out_dir_option(ds_cmd, ds_out_dir, "Base directory for a relative --out");

	try {
		app.parse(argc, argv);
	} catch (const CLI::ParseError& e) {
		const int code = app.exit(e);
		return code == 0 ? kExitOk : kExitUsage;
	}

	try {
		echo_config(*app.get_subcommands().front(), verbose);
		if (train_cmd->parsed()) return cmd_train(ta, verbose);
		if (attr_cmd->parsed()) return cmd_attribute(aa, verbose);
		if (verify_cmd->parsed()) return cmd_verify(verify_seed, only);
		if (taps_cmd->parsed()) return cmd_list_taps(taps_model);
		if (ds_cmd->parsed()) return cmd_export_dataset(ds_synth, ds_seed, ds_val, ds_out_dir, ds_out);
	} catch (const UsageError& e) {
		std::cerr << "normgrad: " << e.what() << '\n';
		return kExitUsage;
	} catch (const Error& e) {
		std::cerr << "normgrad: error: " << e.what() << '\n';
		return kExitUsage;
	} catch (const fs::filesystem_error& e) {
		std::cerr << "normgrad: error: " << e.what() << '\n';
		return kExitUsage;
	}
	return kExitUsage;
}
