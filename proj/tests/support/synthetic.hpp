#pragma once

#include <cmath>

#include "nowcast/pipeline.hpp"

namespace nowcast::testing {

struct NormalizedSplits {
  std::vector<Sample> train, val, test;
  std::array<VariableStats, 6> stats;
};

// Generate, filter, split by whole sequences and normalize with training stats.
inline NormalizedSplits synthetic_splits(const SyntheticConfig& cfg, double test_fraction, double val_fraction,
                                         FilterRule rule = {}) {
  auto kept = apply_sample_filter(make_samples(synth_generate(cfg)).samples, rule).kept;
  const double L = double(cfg.frames_per_sequence);
  const auto n = double(cfg.n_sequences);
  const double test_from = std::floor(n * (1.0 - test_fraction)) * L;
  auto tt = split_train_test(std::move(kept), test_from);
  const double val_from = std::floor(n * (1.0 - test_fraction) * (1.0 - val_fraction)) * L;
  auto tv = split_train_test(std::move(tt.train), val_from);
  NormalizedSplits out;
  out.stats = compute_stats(tv.train);
  for (auto& s : tv.train) out.train.push_back(normalize_sample(s, out.stats));
  for (auto& s : tv.test) out.val.push_back(normalize_sample(s, out.stats));
  for (auto& s : tt.test) out.test.push_back(normalize_sample(s, out.stats));
  return out;
}

}  // namespace nowcast::testing
