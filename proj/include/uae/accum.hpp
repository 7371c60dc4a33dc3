#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace uae {

// Order-invariant summation: addends are sorted by value before
// accumulation, so the result depends only on the multiset of inputs.
// Every reduction over the point axis goes through this, which is what
// makes pooling, softmax denominators and batch statistics bit-exactly
// permutation invariant. Accumulation happens in double regardless of
// the tensor scalar type.
inline double sorted_sum(std::vector<double>& scratch) {
  std::sort(scratch.begin(), scratch.end());
  double acc = 0.0;
  for (double v : scratch) acc += v;
  return acc;
}

template <class T>
double sorted_sum_of(const T* data, size_t n, size_t stride = 1) {
  std::vector<double> scratch(n);
  for (size_t i = 0; i < n; ++i) scratch[i] = static_cast<double>(data[i * stride]);
  return sorted_sum(scratch);
}

}  // namespace uae
