#pragma once

#include <iosfwd>
#include <string>

#include "wpca/archmodel.hpp"
#include "wpca/gasearch.hpp"
#include "wpca/rankeval.hpp"

namespace wpca {

// Compact JSON description of an architecture; enum names match to_string.
// Round-trips through config_from_json. Syntax only: structural rules are
// checked later by ArchConfig::validate.
std::string config_to_json(const ArchConfig& config);

// Throws codec_error on malformed JSON, unknown keys, or wrong value types.
ArchConfig config_from_json(const std::string& text);

// JSON lines, one record per line, either
//   {"id": str, "genome": [int, ...], "score": float}
// or
//   {"id": str, "flexibert": {config object}, "score": float}.
// Blank and '#' comment lines are skipped. Ids must be unique. Errors name
// the file and 1-based line. With
// require_score=false records may omit "score" (defaults 0), which suits
// plain architecture lists.
RankingDataset load_dataset(const std::string& path, bool require_score = true);
RankingDataset parse_dataset(std::istream& in, const std::string& name, bool require_score = true);
void save_dataset(const RankingDataset& dataset, std::ostream& out);

// Text matrix of token ids: one input per line, whitespace-separated
// nonnegative integers, equal row lengths.
Batch load_batch(const std::string& path);
Batch parse_batch(std::istream& in, const std::string& name);

// Pretty-printed search report; wall_seconds sits on its own line so replay
// comparisons can drop the timing.
std::string report_to_json(const SearchReport& report);

}  // namespace wpca
