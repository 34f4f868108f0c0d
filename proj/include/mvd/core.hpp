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

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvd {

enum class ErrorKind { config, contract, numerical, runtime };

/// Base error for the engine. `module` names the subsystem that raised it,
/// so the CLI can print "module: message" and pick an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, const std::string& what)
      : std::runtime_error(module + ": " + what), kind_(kind), module_(std::move(module)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorKind kind_;
  std::string module_;
};

struct ConfigError : Error {
  ConfigError(std::string module, const std::string& what)
      : Error(ErrorKind::config, std::move(module), what) {}
};

struct ContractError : Error {
  ContractError(std::string module, const std::string& what)
      : Error(ErrorKind::contract, std::move(module), what) {}
};

struct NumericalError : Error {
  NumericalError(std::string module, const std::string& what)
      : Error(ErrorKind::numerical, std::move(module), what) {}
};

struct RuntimeError : Error {
  RuntimeError(std::string module, const std::string& what)
      : Error(ErrorKind::runtime, std::move(module), what) {}
};

struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  std::size_t plane() const noexcept {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

enum class Space { latent, image };

/// Channel-major (C, H, W) real tensor. Used for latents, predicted
/// originals, noise, and decoded images alike; `space` records which.
class LatentField {
 public:
  LatentField() = default;
  explicit LatentField(Shape shape, Space space = Space::latent, double fill = 0.0)
      : shape_(shape), space_(space), data_(shape.size(), fill) {}
  LatentField(Shape shape, Space space, std::vector<double> data);

  const Shape& shape() const noexcept { return shape_; }
  Space space() const noexcept { return space_; }
  void set_space(Space s) noexcept { space_ = s; }
  int channels() const noexcept { return shape_.channels; }
  int height() const noexcept { return shape_.height; }
  int width() const noexcept { return shape_.width; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x];
  }
  double at(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x];
  }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  bool all_finite() const noexcept;

 private:
  Shape shape_;
  Space space_ = Space::latent;
  std::vector<double> data_;
};

/// Throws ContractError when shapes differ.
void require_same_shape(const LatentField& a, const LatentField& b, const char* module,
                        const char* what);

double max_abs_diff(const LatentField& a, const LatentField& b);
double mean_abs_diff(const LatentField& a, const LatentField& b);

/// Single-channel per-pixel map (masks, weights, depth).
struct Map2D {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Map2D() = default;
  Map2D(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  double& operator()(int y, int x) noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
  double operator()(int y, int x) const noexcept {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t size() const noexcept { return data.size(); }
};

/// Runs fn(0..n-1) on up to `workers` threads. Every index runs even if one
/// throws; the exception of the lowest failing index is rethrown afterwards.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace mvd
