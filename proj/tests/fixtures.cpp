// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <atomic>
#include <cmath>
#include <random>
#include <unistd.h>

namespace moqe::testing {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

Tensor random_tensor(Shape shape, Rng& rng, Real scale) {
  Tensor t(std::move(shape));
  std::normal_distribution<Real> n(0.0, scale);
  for (Index i = 0; i < t.numel(); ++i) t.data[i] = n(rng);
  return t;
}

GradReport check_gradients(const std::function<Var(Graph&)>& loss, const std::vector<Tensor*>& params, Real step,
                           Real rel_tol, Real abs_floor) {
  for (Tensor* p : params) {
    p->requires_grad = true;
    p->zero_grad();
  }
  {
    Graph g;
    g.backward(loss(g));
  }
  auto eval = [&] {
    Graph g;
    return g.item(loss(g));
  };
  GradReport rep;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = *params[t];
    const VectorX analytic = *p.grad;
    for (Index i = 0; i < p.numel(); ++i) {
      const Real keep = p.data[i];
      p.data[i] = keep + step;
      const Real up = eval();
      p.data[i] = keep - step;
      const Real down = eval();
      p.data[i] = keep;
      const Real numeric = (up - down) / (2.0 * step);
      const Real a = analytic[i];
      const Real err = std::abs(a - numeric);
      const Real mag = std::max(std::abs(a), std::abs(numeric));
      rep.worst_abs = std::max(rep.worst_abs, err);
      if (mag > 0) rep.worst_rel = std::max(rep.worst_rel, err / mag);
      ++rep.checked;
      if (err > std::max(abs_floor, rel_tol * mag)) {
        if (rep.failures++ == 0)
          rep.first_failure = "param " + std::to_string(t) + " element " + std::to_string(i) + ": analytic " +
                              std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return rep;
}

Dataset tiny_cv(Index per_class, std::uint64_t seed) {
  CvGenConfig c;
  c.classes = 4;
  c.families = 3;
  c.per_class = per_class;
  c.channels = 3;
  c.size = 8;
  c.seed = seed;
  return generate_cv(c);
}

std::unique_ptr<Model> tiny_cv_model(std::uint64_t seed) {
  return make_model("cv_resnet", {{"channels", 3}, {"size", 8}, {"classes", 4}, {"width", 4}}, seed);
}

Dataset tiny_nlp(std::uint64_t seed) {
  NlpGenConfig c;
  c.sources = 3;
  c.documents_per_source = 2;
  c.document_bytes = 120;
  c.seq_len = 8;
  c.seed = seed;
  return sequences_from_documents(generate_corpus(c), c.seq_len);
}

std::unique_ptr<Model> tiny_lm(std::uint64_t seed) {
  return make_model("lm_transformer",
                    {{"vocab", 256}, {"width", 8}, {"heads", 2}, {"hidden", 16}, {"layers", 1}, {"context", 8}}, seed);
}

Registry tiny_registry(const Model& base) {
  Registry r;
  QuantSpec a;
  a.scheme = QuantScheme::rtn_per_tensor;
  a.bits = 4;
  QuantSpec b;
  b.scheme = QuantScheme::affine_per_channel;
  b.bits = 8;
  QuantSpec c;
  c.scheme = QuantScheme::blockwise;
  c.bits = 4;
  c.block_size = 4;
  for (const QuantSpec& s : {a, b, c}) r.add(quantize_model(base, s));
  return r;
}

RunConfig small_cv_run() {
  RunConfig c = default_cv_config();
  c.data.cv.per_class = 4;
  c.data.cv.size = 8;
  c.data.subsets = 7;
  c.base_model.config = {{"channels", 3}, {"size", 8}, {"classes", 10}, {"width", 4}};
  c.base_model.train.epochs = 1;
  c.base_model.train.null_inputs = 10;
  for (QuantSpec& q : c.quant)
    if (q.needs_calibration()) q.calib_samples = 8;
  c.train.epochs = 2;
  c.train.warm_epochs = 1;
  c.eval.sweep_counts = {2, 3};
  c.eval.sweep_seeds = {1};
  c.bench.requests = 4;
  c.bench.repetitions = 2;
  c.bench.warmup = 1;
  return c;
}

}  // namespace moqe::testing
