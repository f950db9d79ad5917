#pragma once

// Auto-tuning: time every interchangeable kernel for each observed context on
// synthetic data of that shape and emit fully concrete table entries.

#include <algorithm>
#include <chrono>
#include <set>
#include <string>
#include <vector>

#include "edgert/dispatch.hpp"
#include "edgert/kernels.hpp"

namespace edgert {

struct TuneCandidate {
  std::string impl_id;
  json impl_params = json::object();
  std::vector<double> samples_ms;
  double median_ms = 0.0;
};

struct TuneResult {
  DispatchKey context;
  std::vector<TuneCandidate> candidates;
  std::size_t winner = 0;

  DispatchEntry entry() const {
    DispatchEntry e;
    e.key = context;
    e.impl_id = candidates[winner].impl_id;
    e.impl_params = candidates[winner].impl_params;
    return e;
  }
};

struct TuneOptions {
  int warmups = 1;
  int reps = 5;
};

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Candidates: every registered kernel of the context's op_kind that has the
// same semantic as the table's current choice and can run the context,
// expanded over its tuning space.
inline std::vector<TuneCandidate> tuning_candidates(const DispatchTable& table, const DispatchKey& ctx,
                                                    const KernelRegistry& registry) {
  const auto* current = table.select(ctx);
  const auto* current_impl = current ? table.registry().find(current->impl_id) : nullptr;
  const auto shape = parse_shape_sig(ctx.op_kind, ctx.shape_sig);
  std::vector<TuneCandidate> out;
  for (const auto* impl : registry.impls_for(ctx.op_kind)) {
    if (current_impl && impl->semantic != current_impl->semantic) continue;
    if (!impl->applicable(ctx.stage, shape)) continue;
    for (const auto& params : impl->tuning_space) out.push_back({impl->impl_id, params, {}, 0.0});
  }
  return out;
}

inline std::vector<TuneResult> auto_tune(const DispatchTable& table, const std::vector<DispatchKey>& contexts,
                                         const KernelRegistry& registry, TuneOptions opts = {}) {
  if (opts.warmups < 1) throw ValidationError("auto_tune: warmups must be >= 1");
  if (opts.reps < 3 || opts.reps % 2 == 0) throw ValidationError("auto_tune: reps must be odd and >= 3");

  std::set<DispatchKey> unique(contexts.begin(), contexts.end());
  std::vector<TuneResult> results;
  for (const auto& ctx : unique) {
    if (!ctx.fully_concrete()) throw ValidationError("auto_tune: calibration contexts must be fully concrete");
    TuneResult r;
    r.context = ctx;
    r.candidates = tuning_candidates(table, ctx, registry);
    if (r.candidates.empty())
      throw NoCandidates("no tunable kernels for " + ctx.op_kind + " [" + ctx.shape_sig + "]");

    SyntheticWorkload work(ctx.op_kind, parse_shape_sig(ctx.op_kind, ctx.shape_sig));
    for (auto& c : r.candidates) {
      const auto fn = registry.at(c.impl_id).bind(c.impl_params);
      for (int i = 0; i < opts.warmups; ++i) fn(work.args());
      c.samples_ms.reserve(static_cast<std::size_t>(opts.reps));
      for (int i = 0; i < opts.reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn(work.args());
        const auto t1 = std::chrono::steady_clock::now();
        c.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      c.median_ms = median_of(c.samples_ms);
    }
    for (std::size_t i = 1; i < r.candidates.size(); ++i)
      if (r.candidates[i].median_ms < r.candidates[r.winner].median_ms) r.winner = i;
    results.push_back(std::move(r));
  }
  return results;
}

inline std::vector<DispatchEntry> tuned_entries(const std::vector<TuneResult>& results) {
  std::vector<DispatchEntry> out;
  out.reserve(results.size());
  for (const auto& r : results) out.push_back(r.entry());
  return out;
}

}  // namespace edgert
