#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "roadseg/errors.hpp"

namespace roadseg {

/// Row-major height x width array of per-pixel values.
template <class T>
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, T fill = T{}) : h_(height), w_(width), data_(checked_size(height, width), fill) {}
  Grid(int height, int width, std::vector<T> data) : h_(height), w_(width), data_(std::move(data)) {
    require(data_.size() == checked_size(height, width), "grid data size does not match dimensions");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(int v, int u) { return data_[static_cast<std::size_t>(v) * w_ + u]; }
  const T& at(int v, int u) const { return data_[static_cast<std::size_t>(v) * w_ + u]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool contains(int v, int u) const { return v >= 0 && v < h_ && u >= 0 && u < w_; }
  bool same_size(int h, int w) const { return h == h_ && w == w_; }
  template <class U>
  bool same_size(const Grid<U>& o) const {
    return o.height() == h_ && o.width() == w_;
  }

  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  friend bool operator==(const Grid& a, const Grid& b) { return a.h_ == b.h_ && a.w_ == b.w_ && a.data_ == b.data_; }

 private:
  static std::size_t checked_size(int h, int w) {
    require(h >= 0 && w >= 0, "grid dimensions must be non-negative");
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }

  int h_ = 0;
  int w_ = 0;
  std::vector<T> data_;
};

/// Binary freespace labels (1 = freespace).
using LabelImage = Grid<std::uint8_t>;

/// Per-pixel freespace probabilities.
using ProbabilityMap = Grid<double>;

enum class WeightKind { semantic, depth };

/// Per-pixel weights in [0, 1] plus where they came from.
struct WeightMap {
  Grid<double> values;
  WeightKind kind = WeightKind::semantic;
};

template <class A, class B>
void require_same_size(const Grid<A>& a, const Grid<B>& b, const std::string& what) {
  if (!a.same_size(b))
    throw ContractError(what + ": size mismatch " + std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                        " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
}

}  // namespace roadseg
