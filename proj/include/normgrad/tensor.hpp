#ifndef NORMGRAD_TENSOR_HPP_
#define NORMGRAD_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "error.hpp"

namespace normgrad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
	return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/**
 * Dense row-major array of real scalars.
 *
 * The shape is fixed at construction; the buffer always holds exactly
 * product(shape) elements. Four-dimensional tensors follow the
 * (batch, channel, height, width) convention used throughout the library.
 * There is no broadcasting: binary operations require equal shapes.
 */
template <typename T>
class BasicTensor {
	static_assert(std::is_floating_point_v<T>, "non floating-point scalar type");

public:
	using value_type = T;

	BasicTensor() = default;

	explicit BasicTensor(Shape shape, T fill = T(0)) :
			shape_(std::move(shape)),
			data_(shape_size(shape_), fill) {}

	BasicTensor(Shape shape, std::vector<T> data) :
			shape_(std::move(shape)),
			data_(std::move(data)) {
		if (data_.size() != shape_size(shape_)) {
			throw ShapeError("tensor data length " + std::to_string(data_.size()) +
					" does not match shape " + shape_string(shape_));
		}
	}

	/// 1-D tensor from a list of values.
	static BasicTensor vector(std::initializer_list<T> values) {
		return BasicTensor({values.size()}, std::vector<T>(values));
	}

	const Shape& shape() const { return shape_; }
	std::size_t rank() const { return shape_.size(); }
	std::size_t size() const { return data_.size(); }
	std::size_t dim(std::size_t axis) const {
		if (axis >= shape_.size()) {
			throw RangeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
		}
		return shape_[axis];
	}

	std::span<T> data() { return data_; }
	std::span<const T> data() const { return data_; }
	const std::vector<T>& values() const { return data_; }

	T& operator[](std::size_t i) { return data_[i]; }
	const T& operator[](std::size_t i) const { return data_[i]; }

	/// Unchecked 4-D access.
	T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
		return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
	}
	const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
		return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
	}

	/// Row-major flat offset of a multi-index; throws on rank or range mismatch.
	std::size_t flat_index(std::span<const std::size_t> index) const {
		if (index.size() != shape_.size()) {
			throw RangeError("index rank " + std::to_string(index.size()) + " does not match shape " +
					shape_string(shape_));
		}
		std::size_t flat = 0;
		for (std::size_t a = 0; a < shape_.size(); ++a) {
			if (index[a] >= shape_[a]) {
				throw RangeError("index " + std::to_string(index[a]) + " out of range on axis " +
						std::to_string(a) + " of shape " + shape_string(shape_));
			}
			flat = flat * shape_[a] + index[a];
		}
		return flat;
	}

	std::vector<std::size_t> unflatten(std::size_t flat) const {
		if (flat >= data_.size()) {
			throw RangeError("flat index " + std::to_string(flat) + " out of range for shape " + shape_string(shape_));
		}
		std::vector<std::size_t> index(shape_.size());
		for (std::size_t a = shape_.size(); a-- > 0;) {
			index[a] = flat % shape_[a];
			flat /= shape_[a];
		}
		return index;
	}

	T& at(std::initializer_list<std::size_t> index) {
		return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
	}
	const T& at(std::initializer_list<std::size_t> index) const {
		return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
	}

	BasicTensor reshaped(Shape shape) const {
		if (shape_size(shape) != data_.size()) {
			throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
		}
		return BasicTensor(std::move(shape), data_);
	}

	bool all_finite() const {
		return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
	}

	/// Throws NumericError naming `what` if any element is NaN or infinite.
	void check_finite(const std::string& what) const {
		if (!all_finite()) throw NumericError(what + ": tensor contains a non-finite value");
	}

	void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

	template <typename U>
	BasicTensor<U> cast() const {
		return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
	}

	friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

private:
	Shape shape_;
	std::vector<T> data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

enum class BinaryOp { add, sub, mul };

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
	if (a.shape() != b.shape()) {
		throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
				shape_string(b.shape()));
	}
}

template <typename T>
BasicTensor<T> elementwise_binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryOp op) {
	require_same_shape(a, b, "elementwise_binary");
	BasicTensor<T> out(a.shape());
	for (std::size_t i = 0; i < a.size(); ++i) {
		switch (op) {
		case BinaryOp::add: out[i] = a[i] + b[i]; break;
		case BinaryOp::sub: out[i] = a[i] - b[i]; break;
		case BinaryOp::mul: out[i] = a[i] * b[i]; break;
		}
	}
	return out;
}

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
	return elementwise_binary(a, b, BinaryOp::add);
}
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
	return elementwise_binary(a, b, BinaryOp::sub);
}
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) {
	return elementwise_binary(a, b, BinaryOp::mul);
}

template <typename T>
BasicTensor<T> scaled(const BasicTensor<T>& a, T s) {
	BasicTensor<T> out = a;
	for (auto& v : out.data()) v *= s;
	return out;
}

template <typename T>
T sum(const BasicTensor<T>& a) {
	return std::accumulate(a.values().begin(), a.values().end(), T(0));
}

template <typename T>
T dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
	require_same_shape(a, b, "dot");
	T acc = 0;
	for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
	return acc;
}

template <typename T>
T frobenius_norm(const BasicTensor<T>& a) {
	T acc = 0;
	for (T v : a.values()) acc += v * v;
	return std::sqrt(acc);
}

template <typename T>
T max_abs(const BasicTensor<T>& a) {
	T m = 0;
	for (T v : a.values()) m = std::max(m, std::abs(v));
	return m;
}

template <typename T>
BasicTensor<T> outer_product(const BasicTensor<T>& u, const BasicTensor<T>& v) {
	if (u.rank() != 1 || v.rank() != 1) {
		throw ShapeError("outer_product expects vectors, got " + shape_string(u.shape()) + " and " +
				shape_string(v.shape()));
	}
	BasicTensor<T> out({u.size(), v.size()});
	for (std::size_t i = 0; i < u.size(); ++i) {
		for (std::size_t j = 0; j < v.size(); ++j) out[i * v.size() + j] = u[i] * v[j];
	}
	return out;
}

/// The channel vector t[n, :, row, col] of a (N,C,H,W) tensor.
template <typename T>
BasicTensor<T> spatial_column(const BasicTensor<T>& t, std::size_t n, std::size_t row, std::size_t col) {
	if (t.rank() != 4) throw ShapeError("spatial_column expects a 4-D tensor, got " + shape_string(t.shape()));
	if (n >= t.dim(0) || row >= t.dim(2) || col >= t.dim(3)) {
		throw RangeError("spatial_column index (" + std::to_string(n) + ",:," + std::to_string(row) + "," +
				std::to_string(col) + ") out of range for shape " + shape_string(t.shape()));
	}
	BasicTensor<T> out({t.dim(1)});
	for (std::size_t c = 0; c < t.dim(1); ++c) out[c] = t(n, c, row, col);
	return out;
}

/// Copy of batch entry n, keeping a leading batch axis of extent 1.
template <typename T>
BasicTensor<T> batch_slice(const BasicTensor<T>& t, std::size_t n) {
	if (t.rank() == 0 || n >= t.dim(0)) {
		throw RangeError("batch index " + std::to_string(n) + " out of range for shape " + shape_string(t.shape()));
	}
	Shape shape = t.shape();
	shape[0] = 1;
	const std::size_t stride = t.size() / t.dim(0);
	std::vector<T> data(t.values().begin() + static_cast<std::ptrdiff_t>(n * stride),
			t.values().begin() + static_cast<std::ptrdiff_t>((n + 1) * stride));
	return BasicTensor<T>(std::move(shape), std::move(data));
}

/// Gathers the listed batch entries into a new batch.
template <typename T>
BasicTensor<T> batch_gather(const BasicTensor<T>& t, std::span<const std::size_t> indices) {
	Shape shape = t.shape();
	const std::size_t stride = t.size() / t.dim(0);
	shape[0] = indices.size();
	std::vector<T> data;
	data.reserve(indices.size() * stride);
	for (std::size_t n : indices) {
		if (n >= t.dim(0)) throw RangeError("batch index " + std::to_string(n) + " out of range");
		auto first = t.values().begin() + static_cast<std::ptrdiff_t>(n * stride);
		data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(stride));
	}
	return BasicTensor<T>(std::move(shape), std::move(data));
}

/// Dense matrix product of 2-D tensors.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
	if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
		throw ShapeError("matmul shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
	}
	const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
	BasicTensor<T> out({m, n});
	for (std::size_t i = 0; i < m; ++i) {
		for (std::size_t p = 0; p < k; ++p) {
			const T aip = a[i * k + p];
			for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * b[p * n + j];
		}
	}
	return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
	if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_string(a.shape()));
	const std::size_t m = a.dim(0), n = a.dim(1);
	BasicTensor<T> out({n, m});
	for (std::size_t i = 0; i < m; ++i) {
		for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
	}
	return out;
}

} // namespace normgrad

#endif // NORMGRAD_TENSOR_HPP_
