#pragma once

#include <nlohmann/json.hpp>
#include <string>

#include "distma/fit.hpp"
#include "distma/small_study.hpp"

namespace distma {

inline constexpr const char* kReportSchemaVersion = "1.0";

// Stable-field-order JSON views of the result types.
nlohmann::ordered_json fit_report(const FitResult& fit, double seconds);
nlohmann::ordered_json egger_report(const EggerResult& e);
nlohmann::ordered_json small_study_report(const SmallStudyResult& r);
nlohmann::ordered_json batch_report(const BatchSummary& s);

}  // namespace distma
