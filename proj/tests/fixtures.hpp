// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "moqe/autodiff.hpp"
#include "moqe/config.hpp"
#include "moqe/experts.hpp"
#include "moqe/models.hpp"
#include "moqe/nn.hpp"

namespace moqe::testing {

// Removed with its contents on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "moqe");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

Tensor random_tensor(Shape shape, Rng& rng, Real scale = 1.0);

struct GradReport {
  Real worst_abs = 0.0;
  Real worst_rel = 0.0;
  Index checked = 0;
  Index failures = 0;  // elements outside max(abs_floor, rel_tol * max(|a|, |n|))
  std::string first_failure;
};

// Central differences of the scalar built by `loss` against the analytic
// gradient, for every element of every tensor in `params`.
GradReport check_gradients(const std::function<Var(Graph&)>& loss, const std::vector<Tensor*>& params,
                           Real step = 1e-6, Real rel_tol = 1e-4, Real abs_floor = 1e-7);

// 4 classes, 3 families, 8x8 images.
Dataset tiny_cv(Index per_class = 4, std::uint64_t seed = 3);
std::unique_ptr<Model> tiny_cv_model(std::uint64_t seed = 5);
// Three Markov sources, sequences of 8 tokens.
Dataset tiny_nlp(std::uint64_t seed = 3);
std::unique_ptr<Model> tiny_lm(std::uint64_t seed = 5);

// rtn int4, per-channel int8 and blockwise int4 experts of `base`.
Registry tiny_registry(const Model& base);

// Shipped image suite, shrunk for unit tests.
RunConfig small_cv_run();

}  // namespace moqe::testing
