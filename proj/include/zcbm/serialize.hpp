#pragma once

#include <json.hpp>

#include "zcbm/pipeline.hpp"
#include "zcbm/session.hpp"

namespace zcbm {

/// Rounds to 9 significant digits, which round-trips any 32-bit float.
double round9(double v);

/// Public view: label, class scores, ranked concepts, reconstruction, solver
/// statistics, retrieval. Numbers use 9 significant digits.
nlohmann::json prediction_to_json(const Prediction& p, const ClassSet& classes);

/// Complete, exactly restorable state (used for session snapshots).
nlohmann::json prediction_state_to_json(const Prediction& p);
Prediction prediction_state_from_json(const nlohmann::json& j);

nlohmann::json session_to_json(const InterventionSession& s, const ClassSet& classes);
nlohmann::json session_state_to_json(const InterventionSession& s);
InterventionSession session_state_from_json(const nlohmann::json& j);

/// One JSON-lines record for batch inference output.
nlohmann::json prediction_record(std::size_t index, const Prediction& p, const ClassSet& classes,
                                 bool with_class_scores);

std::string format_timestamp(std::chrono::system_clock::time_point t);

}  // namespace zcbm
