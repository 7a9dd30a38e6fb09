#include "wpca/serialize.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "wpca/errors.hpp"

namespace wpca {

namespace {

using nlohmann::json;

std::string normalized(std::string name) {
  for (char& c : name)
    if (c == '_') c = '-';
  return name;
}

MixOp parse_mix_op(const std::string& name) {
  const std::string t = normalized(name);
  for (MixOp op : {MixOp::scaled_dot_product, MixOp::multiplicative, MixOp::fourier, MixOp::cosine,
                   MixOp::dynamic_conv})
    if (t == to_string(op)) return op;
  throw codec_error("unknown mixing op '" + name + "'");
}

BlockKind parse_block_kind(const std::string& name) {
  const std::string t = normalized(name);
  for (BlockKind k : {BlockKind::bert, BlockKind::mobilebert, BlockKind::flexibert_element})
    if (t == to_string(k)) return k;
  throw codec_error("unknown block kind '" + name + "'");
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> known, const char* what) {
  for (const auto& item : obj.items()) {
    bool ok = false;
    for (const char* k : known)
      if (item.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw codec_error(std::string(what) + ": unknown key '" + item.key() + "'");
  }
}

json layer_to_json(const LayerSpec& layer) {
  json j;
  j["kind"] = to_string(layer.block_kind);
  j["op"] = to_string(layer.attn_op);
  j["heads"] = layer.heads;
  j["ffn_hidden"] = layer.ffn_hidden;
  j["ffn_stacks"] = layer.ffn_stacks;
  if (layer.conv_kernel != 0) j["conv_kernel"] = layer.conv_kernel;
  if (layer.inner_dim != 0) j["inner_dim"] = layer.inner_dim;
  return j;
}

template <class T>
T field_as(const json& obj, const char* key, const char* what) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw codec_error(std::string(what) + ": bad value for '" + key + "': " + e.what());
  }
}

template <class T>
void maybe_field(const json& obj, const char* key, T& out, const char* what) {
  if (obj.contains(key)) out = field_as<T>(obj, key, what);
}

LayerSpec layer_from_json(const json& j) {
  if (!j.is_object()) throw codec_error("layer: expected an object");
  reject_unknown_keys(j, {"kind", "op", "heads", "ffn_hidden", "ffn_stacks", "conv_kernel", "inner_dim"},
                      "layer");
  LayerSpec layer;
  if (j.contains("kind")) layer.block_kind = parse_block_kind(field_as<std::string>(j, "kind", "layer"));
  if (j.contains("op")) layer.attn_op = parse_mix_op(field_as<std::string>(j, "op", "layer"));
  maybe_field(j, "heads", layer.heads, "layer");
  maybe_field(j, "ffn_hidden", layer.ffn_hidden, "layer");
  maybe_field(j, "ffn_stacks", layer.ffn_stacks, "layer");
  maybe_field(j, "conv_kernel", layer.conv_kernel, "layer");
  maybe_field(j, "inner_dim", layer.inner_dim, "layer");
  return layer;
}

json config_to_json_obj(const ArchConfig& config) {
  json j;
  j["embed_dim"] = config.embed_dim;
  j["token_embed_dim"] = config.token_embed_dim;
  j["vocab_size"] = config.vocab_size;
  j["max_seq_len"] = config.max_seq_len;
  j["layers"] = json::array();
  for (const LayerSpec& layer : config.layers) j["layers"].push_back(layer_to_json(layer));
  return j;
}

ArchConfig config_from_json_obj(const json& j) {
  if (!j.is_object()) throw codec_error("config: expected an object");
  reject_unknown_keys(j, {"embed_dim", "token_embed_dim", "vocab_size", "max_seq_len", "layers"},
                      "config");
  ArchConfig config;
  maybe_field(j, "embed_dim", config.embed_dim, "config");
  maybe_field(j, "token_embed_dim", config.token_embed_dim, "config");
  maybe_field(j, "vocab_size", config.vocab_size, "config");
  maybe_field(j, "max_seq_len", config.max_seq_len, "config");
  if (!j.contains("layers") || !j.at("layers").is_array())
    throw codec_error("config: missing 'layers' array");
  config.layers.clear();
  for (const json& lj : j.at("layers")) config.layers.push_back(layer_from_json(lj));
  return config;
}

json parse_line(const std::string& line, const std::string& where) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw codec_error(where + ": " + e.what());
  }
}

}  // namespace

std::string config_to_json(const ArchConfig& config) { return config_to_json_obj(config).dump(); }

ArchConfig config_from_json(const std::string& text) {
  return config_from_json_obj(parse_line(text, "config"));
}

RankingDataset parse_dataset(std::istream& in, const std::string& name, bool require_score) {
  RankingDataset ds;
  std::set<std::string> ids;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const std::string where = name + ":" + std::to_string(lineno);
    const json j = parse_line(line, where);
    if (!j.is_object()) throw codec_error(where + ": expected an object");
    try {
      reject_unknown_keys(j, {"id", "genome", "flexibert", "score"}, "record");
      RankingRecord rec;
      rec.id = field_as<std::string>(j, "id", "record");
      if (j.contains("genome") == j.contains("flexibert"))
        throw codec_error("record needs exactly one of 'genome' or 'flexibert'");
      if (j.contains("genome")) rec.genome = field_as<std::vector<int>>(j, "genome", "record");
      if (j.contains("flexibert")) rec.flexibert = config_from_json_obj(j.at("flexibert"));
      if (j.contains("score"))
        rec.score = field_as<double>(j, "score", "record");
      else if (require_score)
        throw codec_error("record is missing 'score'");
      if (!ids.insert(rec.id).second) throw codec_error("duplicate id '" + rec.id + "'");
      ds.records.push_back(std::move(rec));
    } catch (const codec_error& e) {
      throw codec_error(where + ": " + e.what());
    }
  }
  return ds;
}

RankingDataset load_dataset(const std::string& path, bool require_score) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open dataset file '" + path + "'");
  return parse_dataset(in, path, require_score);
}

void save_dataset(const RankingDataset& dataset, std::ostream& out) {
  for (const RankingRecord& rec : dataset.records) {
    json j;
    j["id"] = rec.id;
    if (rec.genome) j["genome"] = *rec.genome;
    if (rec.flexibert) j["flexibert"] = config_to_json_obj(*rec.flexibert);
    j["score"] = rec.score;
    out << j.dump() << '\n';
  }
}

Batch parse_batch(std::istream& in, const std::string& name) {
  Batch batch;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream row(line);
    std::vector<std::int64_t> ids;
    std::string tok;
    while (row >> tok) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0)
        throw codec_error(name + ":" + std::to_string(lineno) + ": bad token id '" + tok + "'");
      ids.push_back(v);
    }
    if (ids.empty()) continue;
    if (batch.n == 0)
      batch.n = static_cast<std::int64_t>(ids.size());
    else if (batch.n != static_cast<std::int64_t>(ids.size()))
      throw codec_error(name + ":" + std::to_string(lineno) + ": row length " +
                        std::to_string(ids.size()) + " differs from " + std::to_string(batch.n));
    batch.ids.insert(batch.ids.end(), ids.begin(), ids.end());
    ++batch.b;
  }
  if (batch.b == 0) throw codec_error(name + ": no token rows");
  return batch;
}

Batch load_batch(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open batch file '" + path + "'");
  return parse_batch(in, path);
}

std::string report_to_json(const SearchReport& report) {
  json best;
  best["genome"] = report.best_genome;
  best["fitness"] = report.best_fitness;
  best["config"] = config_to_json_obj(report.best_config);
  best["params"] = {{"embeddings", report.best_params.embeddings},
                    {"attention", report.best_params.attention},
                    {"ffn", report.best_params.ffn},
                    {"norms", report.best_params.norms},
                    {"projections", report.best_params.projections},
                    {"total", report.best_params.total}};
  json j;
  j["fitness"] = report.fitness_name;
  j["seed"] = report.seed;
  j["evaluations"] = report.evaluations;
  j["wall_seconds"] = report.wall_seconds;
  j["best"] = best;
  j["trace"] = {{"best_fitness", report.best_fitness_trace},
                {"best_genome", report.best_genome_per_gen}};
  return j.dump(2);
}

}  // namespace wpca
