#pragma once

// Oracle-metric evaluation of a trained model: sample each held scene under
// its known conditioning, then score layout / attribute / count fidelity with
// the blob detector.

#include <vector>

#include "disco/cmadiff.hpp"
#include "disco/synthdata.hpp"
#include "disco/trainer.hpp"

namespace disco {

struct EvalOpts {
  int num = 64; // scenes to sample (capped by the dataset)
  std::uint64_t seed = 1234;
  SampleOpts sample;
  int threads = 0;
};

struct EvalReport {
  EvalMetrics metrics;
  int num = 0;
};

inline EvalReport evaluate_model(const DiscoModel& model, const Dataset& data, const EvalOpts& opts = {}) {
  int n = std::min<int>(opts.num, int(data.graphs.size()));
  if (n == 0) fail(errc::constraint, "evaluate: empty dataset");
  std::vector<Tensor> samples(static_cast<std::size_t>(n));
  std::vector<SceneGraph> graphs(data.graphs.begin(), data.graphs.begin() + n);
  parallel_for(n, opts.threads, [&](int i) {
    Rng rng = Rng(opts.seed).split("eval-prior").split(std::uint64_t(i));
    PreparedCond prep = prepare_cond(model, graphs[std::size_t(i)], rng);
    std::uint64_t img_seed = Rng(opts.seed).split("eval-image").split(std::uint64_t(i)).seed;
    samples[std::size_t(i)] = sample_image(model, prep.cond, img_seed, opts.sample);
  });
  EvalReport rep;
  rep.metrics = eval_metrics(samples, graphs);
  rep.num = n;
  return rep;
}

} // namespace disco
