#ifndef NORMGRAD_LAYERS_HPP_
#define NORMGRAD_LAYERS_HPP_

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace normgrad {

/// Sliding-window geometry shared by convolution and pooling.
struct WindowGeometry {
	std::size_t kernel_h = 1;
	std::size_t kernel_w = 1;
	std::size_t stride = 1;
	std::size_t padding = 0;

	friend bool operator==(const WindowGeometry&, const WindowGeometry&) = default;
};

inline std::size_t window_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
	if (stride == 0) throw ShapeError("window stride must be >= 1");
	if (in + 2 * padding < kernel) {
		throw ShapeError("spatial underflow: extent " + std::to_string(in) + " with padding " +
				std::to_string(padding) + " is smaller than kernel " + std::to_string(kernel));
	}
	return (in + 2 * padding - kernel) / stride + 1;
}

/// Output (H'', W'') of a window applied to an (H', W') input.
inline std::pair<std::size_t, std::size_t> window_output_hw(std::size_t h, std::size_t w, const WindowGeometry& g) {
	return {window_output_extent(h, g.kernel_h, g.stride, g.padding),
			window_output_extent(w, g.kernel_w, g.stride, g.padding)};
}

/**
 * Lowers sample `n` of a (N,C,H,W) tensor to its patch matrix.
 *
 * The result has H''W'' rows, one per output location in row-major order, and
 * C*kernel_h*kernel_w columns flattened in (channel, kernel row, kernel col)
 * order. Positions that fall into the zero padding contribute zeros.
 */
template <typename T>
BasicTensor<T> im2row(const BasicTensor<T>& x, const WindowGeometry& g, std::size_t n = 0) {
	if (x.rank() != 4) throw ShapeError("im2row expects a 4-D tensor, got " + shape_string(x.shape()));
	if (n >= x.dim(0)) throw RangeError("im2row batch index " + std::to_string(n) + " out of range");
	const std::size_t channels = x.dim(1), h = x.dim(2), w = x.dim(3);
	const auto [oh, ow] = window_output_hw(h, w, g);
	const std::size_t cols = channels * g.kernel_h * g.kernel_w;
	BasicTensor<T> rows({oh * ow, cols});
	auto out = rows.data();
	const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.padding);
	for (std::size_t oy = 0; oy < oh; ++oy) {
		for (std::size_t ox = 0; ox < ow; ++ox) {
			T* row = out.data() + (oy * ow + ox) * cols;
			std::size_t j = 0;
			for (std::size_t c = 0; c < channels; ++c) {
				for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
					const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
					for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++j) {
						const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
						if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
								ix >= static_cast<std::ptrdiff_t>(w)) {
							row[j] = T(0);
						} else {
							row[j] = x(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
						}
					}
				}
			}
		}
	}
	return rows;
}

/// Adjoint of im2row: scatters patch-matrix rows back into sample `n` of `dx` (accumulating).
template <typename T>
void row2im_accumulate(const BasicTensor<T>& rows, const WindowGeometry& g, BasicTensor<T>& dx, std::size_t n) {
	const std::size_t channels = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
	const auto [oh, ow] = window_output_hw(h, w, g);
	const std::size_t cols = channels * g.kernel_h * g.kernel_w;
	if (rows.rank() != 2 || rows.dim(0) != oh * ow || rows.dim(1) != cols) {
		throw ShapeError("row2im: patch matrix " + shape_string(rows.shape()) + " does not match geometry");
	}
	const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.padding);
	for (std::size_t oy = 0; oy < oh; ++oy) {
		for (std::size_t ox = 0; ox < ow; ++ox) {
			const T* row = rows.data().data() + (oy * ow + ox) * cols;
			std::size_t j = 0;
			for (std::size_t c = 0; c < channels; ++c) {
				for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
					const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
					for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++j) {
						const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
						if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
								ix >= static_cast<std::ptrdiff_t>(w)) {
							continue;
						}
						dx(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) += row[j];
					}
				}
			}
		}
	}
}

/**
 * Cross-correlation of x (N,C',H',W') with weight (C'',C',Hk,Wk) plus bias (C'').
 *
 * Computed per sample as im2row(x) * W^T with W the weight reshaped to
 * C'' x (C'HkWk).
 */
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
		const WindowGeometry& g) {
	if (x.rank() != 4 || weight.rank() != 4) {
		throw ShapeError("conv2d expects 4-D input and weight, got " + shape_string(x.shape()) + " and " +
				shape_string(weight.shape()));
	}
	if (x.dim(1) != weight.dim(1)) {
		throw ShapeError("conv2d channel mismatch: input " + shape_string(x.shape()) + " vs weight " +
				shape_string(weight.shape()));
	}
	if (weight.dim(2) != g.kernel_h || weight.dim(3) != g.kernel_w) {
		throw ShapeError("conv2d weight " + shape_string(weight.shape()) + " does not match kernel geometry");
	}
	const std::size_t batch = x.dim(0), out_c = weight.dim(0);
	if (bias.size() != out_c) throw ShapeError("conv2d bias length does not match output channels");
	const auto [oh, ow] = window_output_hw(x.dim(2), x.dim(3), g);
	const std::size_t positions = oh * ow;
	const std::size_t cols = weight.size() / out_c;
	BasicTensor<T> y({batch, out_c, oh, ow});
	const T* wt = weight.data().data();
	for (std::size_t n = 0; n < batch; ++n) {
		const BasicTensor<T> patches = im2row(x, g, n);
		const T* pr = patches.data().data();
		T* yn = y.data().data() + n * out_c * positions;
		for (std::size_t p = 0; p < positions; ++p) {
			const T* row = pr + p * cols;
			for (std::size_t k = 0; k < out_c; ++k) {
				const T* wk = wt + k * cols;
				T acc = bias[k];
				for (std::size_t j = 0; j < cols; ++j) acc += row[j] * wk[j];
				yn[k * positions + p] = acc;
			}
		}
	}
	return y;
}

template <typename T>
struct ConvGrads {
	BasicTensor<T> input;
	BasicTensor<T> weight;
	BasicTensor<T> bias;
};

/// Gradients of a conv2d given dl/dy; dW = sum over samples of (dl/dX'')^T * im2row(x).
template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& dy,
		const WindowGeometry& g) {
	const std::size_t batch = x.dim(0), out_c = weight.dim(0);
	const std::size_t positions = dy.dim(2) * dy.dim(3);
	const std::size_t cols = weight.size() / out_c;
	ConvGrads<T> grads{BasicTensor<T>(x.shape()), BasicTensor<T>(weight.shape()), BasicTensor<T>({out_c})};
	T* dw = grads.weight.data().data();
	const T* wt = weight.data().data();
	BasicTensor<T> dpatches({positions, cols});
	for (std::size_t n = 0; n < batch; ++n) {
		const BasicTensor<T> patches = im2row(x, g, n);
		const T* pr = patches.data().data();
		const T* dyn = dy.data().data() + n * out_c * positions;
		dpatches.fill(T(0));
		T* dp = dpatches.data().data();
		for (std::size_t k = 0; k < out_c; ++k) {
			T* dwk = dw + k * cols;
			const T* wk = wt + k * cols;
			T db = 0;
			for (std::size_t p = 0; p < positions; ++p) {
				const T gk = dyn[k * positions + p];
				db += gk;
				const T* row = pr + p * cols;
				T* drow = dp + p * cols;
				for (std::size_t j = 0; j < cols; ++j) {
					dwk[j] += gk * row[j];
					drow[j] += gk * wk[j];
				}
			}
			grads.bias[k] += db;
		}
		row2im_accumulate(dpatches, g, grads.input, n);
	}
	return grads;
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
	BasicTensor<T> y = x;
	for (auto& v : y.data()) v = v > T(0) ? v : T(0);
	return y;
}

/// Gradient passes only where the layer input is strictly positive.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
	BasicTensor<T> dx(x.shape());
	for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
	return dx;
}

/// Max pooling without padding. `argmax` receives the flat input offset of each output's winner.
template <typename T>
BasicTensor<T> maxpool_forward(const BasicTensor<T>& x, const WindowGeometry& g, std::vector<std::size_t>& argmax) {
	const std::size_t batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
	const auto [oh, ow] = window_output_hw(h, w, g);
	BasicTensor<T> y({batch, channels, oh, ow});
	argmax.assign(y.size(), 0);
	std::size_t o = 0;
	for (std::size_t n = 0; n < batch; ++n) {
		for (std::size_t c = 0; c < channels; ++c) {
			for (std::size_t oy = 0; oy < oh; ++oy) {
				for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
					T best = -std::numeric_limits<T>::infinity();
					std::size_t best_at = 0;
					for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
						for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
							const std::size_t iy = oy * g.stride + ky, ix = ox * g.stride + kx;
							const std::size_t at = ((n * channels + c) * h + iy) * w + ix;
							// strict comparison keeps the first occurrence on ties
							if (x[at] > best) {
								best = x[at];
								best_at = at;
							}
						}
					}
					y[o] = best;
					argmax[o] = best_at;
				}
			}
		}
	}
	return y;
}

template <typename T>
BasicTensor<T> maxpool_backward(const Shape& in_shape, const std::vector<std::size_t>& argmax, const BasicTensor<T>& dy) {
	BasicTensor<T> dx(in_shape);
	for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
	return dx;
}

template <typename T>
BasicTensor<T> avgpool_forward(const BasicTensor<T>& x, const WindowGeometry& g) {
	const std::size_t batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
	const auto [oh, ow] = window_output_hw(h, w, g);
	const T inv = T(1) / static_cast<T>(g.kernel_h * g.kernel_w);
	BasicTensor<T> y({batch, channels, oh, ow});
	for (std::size_t n = 0; n < batch; ++n) {
		for (std::size_t c = 0; c < channels; ++c) {
			for (std::size_t oy = 0; oy < oh; ++oy) {
				for (std::size_t ox = 0; ox < ow; ++ox) {
					T acc = 0;
					for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
						for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
							acc += x(n, c, oy * g.stride + ky, ox * g.stride + kx);
						}
					}
					y(n, c, oy, ox) = acc * inv;
				}
			}
		}
	}
	return y;
}

template <typename T>
BasicTensor<T> avgpool_backward(const Shape& in_shape, const WindowGeometry& g, const BasicTensor<T>& dy) {
	BasicTensor<T> dx(in_shape);
	const T inv = T(1) / static_cast<T>(g.kernel_h * g.kernel_w);
	for (std::size_t n = 0; n < dy.dim(0); ++n) {
		for (std::size_t c = 0; c < dy.dim(1); ++c) {
			for (std::size_t oy = 0; oy < dy.dim(2); ++oy) {
				for (std::size_t ox = 0; ox < dy.dim(3); ++ox) {
					const T share = dy(n, c, oy, ox) * inv;
					for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
						for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
							dx(n, c, oy * g.stride + ky, ox * g.stride + kx) += share;
						}
					}
				}
			}
		}
	}
	return dx;
}

/// (N,C,H,W) -> (N,C) spatial mean.
template <typename T>
BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>& x) {
	const std::size_t batch = x.dim(0), channels = x.dim(1), area = x.dim(2) * x.dim(3);
	BasicTensor<T> y({batch, channels});
	for (std::size_t nc = 0; nc < batch * channels; ++nc) {
		T acc = 0;
		for (std::size_t i = 0; i < area; ++i) acc += x[nc * area + i];
		y[nc] = acc / static_cast<T>(area);
	}
	return y;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& in_shape, const BasicTensor<T>& dy) {
	BasicTensor<T> dx(in_shape);
	const std::size_t area = in_shape[2] * in_shape[3];
	for (std::size_t nc = 0; nc < dy.size(); ++nc) {
		const T share = dy[nc] / static_cast<T>(area);
		for (std::size_t i = 0; i < area; ++i) dx[nc * area + i] = share;
	}
	return dx;
}

/// y = x W^T + b for x (N,F_in), W (F_out,F_in).
template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
	const std::size_t batch = x.dim(0), fin = weight.dim(1), fout = weight.dim(0);
	if (x.rank() != 2 || x.dim(1) != fin) {
		throw ShapeError("linear input " + shape_string(x.shape()) + " does not match weight " +
				shape_string(weight.shape()));
	}
	BasicTensor<T> y({batch, fout});
	for (std::size_t n = 0; n < batch; ++n) {
		for (std::size_t o = 0; o < fout; ++o) {
			T acc = bias[o];
			for (std::size_t i = 0; i < fin; ++i) acc += x[n * fin + i] * weight[o * fin + i];
			y[n * fout + o] = acc;
		}
	}
	return y;
}

template <typename T>
struct LinearGrads {
	BasicTensor<T> input;
	BasicTensor<T> weight;
	BasicTensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& dy) {
	const std::size_t batch = x.dim(0), fin = weight.dim(1), fout = weight.dim(0);
	LinearGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(weight.shape()), BasicTensor<T>({fout})};
	for (std::size_t n = 0; n < batch; ++n) {
		for (std::size_t o = 0; o < fout; ++o) {
			const T d = dy[n * fout + o];
			g.bias[o] += d;
			for (std::size_t i = 0; i < fin; ++i) {
				g.weight[o * fin + i] += d * x[n * fin + i];
				g.input[n * fin + i] += d * weight[o * fin + i];
			}
		}
	}
	return g;
}

} // namespace normgrad

#endif // NORMGRAD_LAYERS_HPP_
