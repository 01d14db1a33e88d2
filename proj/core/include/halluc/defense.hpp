#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "halluc/model.hpp"

namespace halluc {

/// Fixed reference threshold in nats, not calibrated for TinyLM (see calibrate_threshold).
inline constexpr double kReferenceEntropyThreshold = 1.6;

/// Shannon entropy in nats with 0 ln 0 = 0, clamped to [0, ln n]. Throws
/// ValidationError unless entries are non-negative and sum to 1 within 1e-6.
double first_token_entropy(std::span<const double> dist);

struct GateDecision {
  TokenSequence prompt;
  double entropy_nats = 0.0;
  double threshold = 0.0;
  bool refused = false;  // entropy_nats > threshold
};

GateDecision gate(const LanguageModel& model, TokenSpan prompt, double threshold);

/// Largest first-token entropy over `raw_prompts`, raised by `margin` (relative).
double calibrate_threshold(const LanguageModel& model, std::span<const TokenSequence> raw_prompts,
                           double margin = 0.05);

/// `points` evenly spaced thresholds over [0, ln vocab_size], endpoints included.
std::vector<double> default_threshold_grid(std::size_t vocab_size, std::size_t points = 64);

struct RecallPoint {
  double theta = 0.0;
  // Fraction of each prompt class not refused; unset when the class is empty.
  std::optional<double> recall_raw;
  std::optional<double> recall_weak;
  std::optional<double> recall_ood;
};

struct RecallCurve {
  std::vector<RecallPoint> points;
};

RecallCurve sweep_thresholds(const LanguageModel& model, std::span<const TokenSequence> raw,
                             std::span<const TokenSequence> weak, std::span<const TokenSequence> ood,
                             std::span<const double> grid);

/// First-token entropy of each prompt, computed on up to `workers` threads.
std::vector<double> prompt_entropies(const LanguageModel& model, std::span<const TokenSequence> prompts,
                                     std::size_t workers = 1);

/// Same as sweep_thresholds for precomputed entropies.
RecallCurve sweep_entropies(std::span<const double> h_raw, std::span<const double> h_weak,
                            std::span<const double> h_ood, std::span<const double> grid);

/// Header `theta,recall_raw,recall_weak,recall_ood`; absent recalls are empty cells.
std::string recall_curve_to_csv(const RecallCurve& curve);
std::string recall_curve_to_json(const RecallCurve& curve);

}  // namespace halluc
