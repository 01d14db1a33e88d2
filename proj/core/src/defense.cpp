#include "halluc/defense.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <sstream>
#include <thread>

#include "halluc/error.hpp"
#include "json.hpp"

namespace halluc {

double first_token_entropy(std::span<const double> dist) {
  if (dist.empty()) throw ValidationError("entropy: empty distribution");
  double sum = 0.0;
  double h = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0)) throw ValidationError("entropy: negative or NaN probability");
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("entropy: distribution is not normalized");
  return std::clamp(h, 0.0, std::log(static_cast<double>(dist.size())));
}

GateDecision gate(const LanguageModel& model, TokenSpan prompt, double threshold) {
  if (!(threshold >= 0.0)) throw ValidationError("gate: threshold must be >= 0");
  GateDecision g;
  g.prompt.assign(prompt.begin(), prompt.end());
  g.entropy_nats = first_token_entropy(model.first_token_distribution(prompt));
  g.threshold = threshold;
  g.refused = g.entropy_nats > threshold;
  return g;
}

double calibrate_threshold(const LanguageModel& model, std::span<const TokenSequence> raw_prompts,
                           double margin) {
  if (raw_prompts.empty()) throw ValidationError("calibrate: no raw prompts");
  double mx = 0.0;
  for (const auto& p : raw_prompts) mx = std::max(mx, first_token_entropy(model.first_token_distribution(p)));
  return mx * (1.0 + margin);
}

std::vector<double> default_threshold_grid(std::size_t vocab_size, std::size_t points) {
  if (points < 2) throw ValidationError("grid: need at least 2 points");
  const double top = std::log(static_cast<double>(vocab_size));
  std::vector<double> grid(points);
  for (std::size_t i = 0; i < points; ++i) {
    grid[i] = top * static_cast<double>(i) / static_cast<double>(points - 1);
  }
  grid.back() = top;
  return grid;
}

namespace {

std::optional<double> recall(std::span<const double> h, double theta) {
  if (h.empty()) return std::nullopt;
  const auto kept = std::count_if(h.begin(), h.end(), [&](double e) { return !(e > theta); });
  return static_cast<double>(kept) / static_cast<double>(h.size());
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

}  // namespace

std::vector<double> prompt_entropies(const LanguageModel& model, std::span<const TokenSequence> prompts,
                                     std::size_t workers) {
  std::vector<double> out(prompts.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i = next++; i < prompts.size(); i = next++) {
      try {
        out[i] = first_token_entropy(model.first_token_distribution(prompts[i]));
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = prompts.size();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < std::min(workers, prompts.size()); ++w) pool.emplace_back(work);
    work();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

RecallCurve sweep_thresholds(const LanguageModel& model, std::span<const TokenSequence> raw,
                             std::span<const TokenSequence> weak, std::span<const TokenSequence> ood,
                             std::span<const double> grid) {
  if (!std::is_sorted(grid.begin(), grid.end())) throw ValidationError("sweep: grid must be ascending");
  return sweep_entropies(prompt_entropies(model, raw), prompt_entropies(model, weak), prompt_entropies(model, ood),
                         grid);
}

RecallCurve sweep_entropies(std::span<const double> h_raw, std::span<const double> h_weak,
                            std::span<const double> h_ood, std::span<const double> grid) {
  if (!std::is_sorted(grid.begin(), grid.end())) throw ValidationError("sweep: grid must be ascending");
  RecallCurve curve;
  for (double theta : grid) {
    curve.points.push_back({theta, recall(h_raw, theta), recall(h_weak, theta), recall(h_ood, theta)});
  }
  return curve;
}

std::string recall_curve_to_csv(const RecallCurve& curve) {
  std::string out = "theta,recall_raw,recall_weak,recall_ood\n";
  for (const auto& p : curve.points) {
    out += cell(p.theta) + "," + cell(p.recall_raw) + "," + cell(p.recall_weak) + "," + cell(p.recall_ood) + "\n";
  }
  return out;
}

std::string recall_curve_to_json(const RecallCurve& curve) {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json rows = json::array();
  for (const auto& p : curve.points) {
    rows.push_back({{"theta", p.theta},
                    {"recall_raw", opt(p.recall_raw)},
                    {"recall_weak", opt(p.recall_weak)},
                    {"recall_ood", opt(p.recall_ood)}});
  }
  return json{{"format", "halluc-recall-curve"}, {"version", 1}, {"points", std::move(rows)}}.dump(2) + "\n";
}

}  // namespace halluc
