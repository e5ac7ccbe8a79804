#ifndef NORMGRAD_RANDOM_HPP_
#define NORMGRAD_RANDOM_HPP_

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace normgrad {

/// Seeded generator whose derived draws are identical on every standard library.
///
/// std::mt19937_64 output is fully specified by the standard; the distribution
/// adaptors are not, so uniform reals and index shuffles are derived here.
class Rng {
public:
	explicit Rng(std::uint64_t seed) : engine_(seed) {}

	std::uint64_t next() { return engine_(); }

	/// Uniform in [0, 1) with 53 bits of mantissa.
	double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

	double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

	/// Uniform integer in [0, n).
	std::size_t index(std::size_t n) {
		// Rejection sampling keeps the draw unbiased.
		const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
		std::uint64_t r;
		do {
			r = engine_();
		} while (r >= limit);
		return static_cast<std::size_t>(r % n);
	}

	template <typename T>
	void shuffle(std::vector<T>& v) {
		for (std::size_t i = v.size(); i > 1; --i) {
			std::swap(v[i - 1], v[index(i)]);
		}
	}

private:
	std::mt19937_64 engine_;
};

} // namespace normgrad

#endif // NORMGRAD_RANDOM_HPP_
