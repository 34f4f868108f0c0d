// Copyright 2026 The mvdiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mvd/core.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

namespace mvd {

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" +
         std::to_string(s.width) + ")";
}

LatentField::LatentField(Shape shape, Space space, std::vector<double> data)
    : shape_(shape), space_(space), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw ContractError("core", "tensor data size " + std::to_string(data_.size()) +
                                    " does not match shape " + to_string(shape_));
  }
}

bool LatentField::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_same_shape(const LatentField& a, const LatentField& b, const char* module,
                        const char* what) {
  if (a.shape() != b.shape()) {
    throw ContractError(module, std::string(what) + ": shape mismatch " + to_string(a.shape()) +
                                    " vs " + to_string(b.shape()));
  }
}

double max_abs_diff(const LatentField& a, const LatentField& b) {
  require_same_shape(a, b, "core", "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double mean_abs_diff(const LatentField& a, const LatentField& b) {
  require_same_shape(a, b, "core", "mean_abs_diff");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  auto run = [&](int i) {
    try {
      fn(i);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  };
  const int threads = std::clamp(workers, 1, n);
  if (threads == 1) {
    for (int i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (int i = next++; i < n; i = next++) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace mvd
