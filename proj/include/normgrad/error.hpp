#ifndef NORMGRAD_ERROR_HPP_
#define NORMGRAD_ERROR_HPP_

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace normgrad {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or layer geometry.
class ShapeError : public Error {
public:
	using Error::Error;
};

/// Index or identifier outside the valid range (tensor index, tap, class, label).
class RangeError : public Error {
public:
	using Error::Error;
};

/// NaN/Inf encountered or a numeric rule that cannot be evaluated.
class NumericError : public Error {
public:
	using Error::Error;
};

/// Malformed or unsupported file content.
class FormatError : public Error {
public:
	using Error::Error;
};

/// Filesystem failure (missing input, unwritable output).
class IoError : public Error {
public:
	using Error::Error;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
	std::ostringstream os;
	os << '(';
	for (std::size_t i = 0; i < shape.size(); ++i) {
		if (i) os << ',';
		os << shape[i];
	}
	os << ')';
	return os.str();
}

} // namespace normgrad

#endif // NORMGRAD_ERROR_HPP_
