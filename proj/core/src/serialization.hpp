#pragma once

// JSON conversions shared by the trace, report and curve writers.

#include "halluc/attack.hpp"
#include "json.hpp"

namespace halluc::detail {

nlohmann::json to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);

nlohmann::json tokens_json(TokenSpan ids, const Vocab& vocab);
TokenSequence tokens_from_json(const nlohmann::json& j, const Vocab& vocab);

// Non-finite values have no JSON representation; they are written as null.
nlohmann::json number_or_null(double v);
double number_or_nan(const nlohmann::json& j);

}  // namespace halluc::detail
