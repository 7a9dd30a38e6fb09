#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "wpca/errors.hpp"
#include "wpca/gasearch.hpp"
#include "wpca/parallel.hpp"
#include "wpca/proxies.hpp"
#include "wpca/rankeval.hpp"
#include "wpca/rng.hpp"
#include "wpca/searchspace.hpp"
#include "wpca/serialize.hpp"
#include "wpca/version.hpp"

namespace {

using namespace wpca;

int default_jobs() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string d17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string dg(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Options shared by every command that instantiates architectures.
struct CommonOpts {
  std::string space_name = "small";
  std::optional<int> m, n, embed, step, token_embed, vocab, seq_len;
  std::optional<std::int64_t> cap;
  std::int64_t batch_b = 128, batch_n = 128;
  std::string batch_file;
  double eta = 0.99;
  std::optional<std::uint64_t> seed;
  int jobs = default_jobs();
  std::string out_path;
};

void add_space_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--space", o.space_name, "space preset: small (12 layers, cap 15.7M) or tiny (6 layers, cap 10M)")
      ->check(CLI::IsMember({"small", "tiny"}));
  cmd->add_option("--m", o.m, "override: layer count");
  cmd->add_option("--n", o.n, "override: FFN width choices per block kind");
  cmd->add_option("--embed-dim", o.embed, "override: embedding width");
  cmd->add_option("--dim-step", o.step, "override: FFN width step");
  cmd->add_option("--cap", o.cap, "override: parameter cap");
  cmd->add_option("--token-embed-dim", o.token_embed, "override: factorized token embedding width");
  cmd->add_option("--vocab", o.vocab, "override: vocabulary size");
  cmd->add_option("--seq-len", o.seq_len, "override: maximum sequence length");
}

void add_batch_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--batch-b", o.batch_b, "scoring batch size");
  cmd->add_option("--batch-n", o.batch_n, "scoring sequence length");
  cmd->add_option("--batch-file", o.batch_file, "token id matrix file instead of a random batch");
}

void add_run_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--eta", o.eta, "PCA cumulative energy threshold")->check(CLI::Range(1e-12, 1.0));
  cmd->add_option("--seed", o.seed, "base seed; omitted seeds are generated and recorded");
  cmd->add_option("--jobs", o.jobs, "parallel evaluations")->check(CLI::PositiveNumber);
  cmd->add_option("--out", o.out_path, "output path (default stdout)");
}

SpaceSpec resolve_space(const CommonOpts& o) {
  SpaceSpec space = o.space_name == "tiny" ? SpaceSpec::tiny_preset() : SpaceSpec::small_preset();
  if (o.m) space.m = *o.m;
  if (o.n) space.n = *o.n;
  if (o.embed) space.embed_dim = *o.embed;
  if (o.step) space.dim_step = *o.step;
  if (o.cap) space.param_cap = *o.cap;
  if (o.token_embed) space.token_embed_dim = *o.token_embed;
  if (o.vocab) space.vocab_size = *o.vocab;
  if (o.seq_len) space.max_seq_len = *o.seq_len;
  return space;
}

std::uint64_t resolve_seed(const CommonOpts& o) {
  if (o.seed) return *o.seed;
  std::random_device rd;
  const std::uint64_t entropy = (static_cast<std::uint64_t>(rd()) << 32) | rd();
  const auto ticks =
      static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
  const std::uint64_t seed = mix_seed(entropy, ticks);
  std::cerr << "note: generated seed " << seed << "\n";
  return seed;
}

struct NamedBatch {
  Batch batch;
  std::string id;
};

NamedBatch make_batch(const CommonOpts& o, const SpaceSpec& space, std::uint64_t seed) {
  if (!o.batch_file.empty()) return {load_batch(o.batch_file), "file:" + o.batch_file};
  const std::uint64_t batch_seed = mix_seed(seed, 0xb47c8e5ull);
  return {random_batch(o.batch_b, o.batch_n, space.vocab_size, batch_seed),
          std::to_string(batch_seed)};
}

// Single writer for all payload output.
struct Sink {
  std::ofstream file;
  std::ostream* out = &std::cout;
  explicit Sink(const std::string& path) {
    if (path.empty()) return;
    file.open(path);
    if (!file) throw input_error("cannot open output file '" + path + "'");
    out = &file;
  }
  std::ostream& stream() { return *out; }
};

void provenance(std::ostream& out, const char* command, const CommonOpts& o, const SpaceSpec& space,
                const NamedBatch& batch, std::uint64_t seed, bool with_eta = true) {
  out << "# wpca " << version << "\n";
  out << "# command " << command << "\n";
  out << "# space " << o.space_name << " m=" << space.m << " n=" << space.n
      << " embed=" << space.embed_dim << " step=" << space.dim_step << " cap=" << space.param_cap
      << " token_embed=" << space.token_embed_dim << " vocab=" << space.vocab_size
      << " seq=" << space.max_seq_len << "\n";
  out << "# batch " << batch.batch.b << "x" << batch.batch.n << " id=" << batch.id << "\n";
  if (with_eta) out << "# eta " << dg(o.eta) << "\n";
  out << "# seed " << seed << "\n";
  out << "# jobs " << o.jobs << "\n";
}

std::uint64_t arch_seed(std::uint64_t base, const RankingRecord& rec) {
  if (rec.genome) return derive_seed(base, std::span<const int>(*rec.genome));
  return derive_seed(base, std::string_view(rec.id));
}

std::string descriptor(const RankingRecord& rec) {
  return rec.genome ? format_genome(*rec.genome) : rec.id;
}

void write_score_rows(std::ostream& out, const std::string& desc, const std::vector<ProxyScore>& rows) {
  for (const ProxyScore& row : rows) {
    out << to_string(row.proxy) << ",\"" << desc << "\"," << d17(row.value) << "," << row.seed << ","
        << row.batch_id << "," << (row.eta ? dg(*row.eta) : "") << "\n";
  }
}

constexpr const char* score_header = "proxy,genome,value,seed,batch_id,eta";

// ---- score ----------------------------------------------------------------

struct ScoreOpts {
  CommonOpts common;
  std::string genome_literal;
  std::string arch_file;
  std::vector<std::string> proxy_names{"w-pca"};
};

int cmd_score(const ScoreOpts& o) {
  if (o.genome_literal.empty() == o.arch_file.empty())
    throw input_error("score: exactly one of --genome or --arch-file is required");
  const SpaceSpec space = resolve_space(o.common);
  const std::uint64_t seed = resolve_seed(o.common);
  const NamedBatch nb = make_batch(o.common, space, seed);

  std::vector<Proxy> proxies;
  for (const std::string& name : o.proxy_names) proxies.push_back(parse_proxy(name));

  std::vector<RankingRecord> records;
  if (!o.genome_literal.empty()) {
    RankingRecord rec;
    rec.id = "genome";
    rec.genome = parse_genome(o.genome_literal);
    records.push_back(std::move(rec));
  } else {
    records = load_dataset(o.arch_file, false).records;
    if (records.empty()) throw input_error("score: '" + o.arch_file + "' holds no records");
  }

  std::vector<std::vector<ProxyScore>> rows(records.size());
  parallel_for(records.size(), o.common.jobs, [&](std::size_t i) {
    const RankingRecord& rec = records[i];
    const ArchConfig cfg = rec.genome ? decode(*rec.genome, space) : *rec.flexibert;
    const Model model = instantiate(cfg, arch_seed(seed, rec));
    ScoreOptions so;
    so.eta = o.common.eta;
    so.seed = arch_seed(seed, rec);
    so.batch_id = nb.id;
    rows[i] = score_proxies(proxies, model, nb.batch, so);
  });

  Sink sink(o.common.out_path);
  provenance(sink.stream(), "score", o.common, space, nb, seed);
  sink.stream() << score_header << "\n";
  for (std::size_t i = 0; i < records.size(); ++i)
    write_score_rows(sink.stream(), descriptor(records[i]), rows[i]);
  return 0;
}

// ---- search ---------------------------------------------------------------

struct SearchOpts {
  CommonOpts common;
  std::string fitness = "w-pca";
  GaConfig ga;
};

int cmd_search(const SearchOpts& o) {
  const SpaceSpec space = resolve_space(o.common);
  const std::uint64_t seed = resolve_seed(o.common);
  const NamedBatch nb = make_batch(o.common, space, seed);
  const Proxy fitness = parse_proxy(o.fitness);

  GaConfig ga = o.ga;
  ga.seed = seed;
  ga.jobs = o.common.jobs;
  ga.fitness_name = to_string(fitness);
  const std::uint64_t weight_base = mix_seed(seed, 0x5eedull);
  const SearchReport report = run_search(space, ga, [&](const ArchGenome& genome) {
    const Model model =
        instantiate(decode(genome, space), derive_seed(weight_base, std::span<const int>(genome)));
    ScoreOptions so;
    so.eta = o.common.eta;
    return score_proxy(fitness, model, nb.batch, so).value;
  });

  nlohmann::json j = nlohmann::json::parse(report_to_json(report));
  j["provenance"] = {{"version", version},
                     {"command", "search"},
                     {"space",
                      {{"preset", o.common.space_name},
                       {"m", space.m},
                       {"n", space.n},
                       {"embed_dim", space.embed_dim},
                       {"dim_step", space.dim_step},
                       {"cap", space.param_cap},
                       {"token_embed_dim", space.token_embed_dim},
                       {"vocab_size", space.vocab_size},
                       {"max_seq_len", space.max_seq_len}}},
                     {"ga",
                      {{"population", ga.population},
                       {"generations", ga.generations},
                       {"crossover_prob", ga.crossover_prob},
                       {"mutation_prob", ga.mutation_prob},
                       {"parent_pool", ga.parent_pool}}},
                     {"batch", {{"b", nb.batch.b}, {"n", nb.batch.n}, {"id", nb.id}}},
                     {"eta", o.common.eta},
                     {"seed", seed}};
  Sink sink(o.common.out_path);
  sink.stream() << j.dump(2) << "\n";
  return 0;
}

// ---- rank -----------------------------------------------------------------

struct RankOpts {
  CommonOpts common;
  std::string dataset;
  std::string proxy = "w-pca";
};

constexpr const char* rank_header = "proxy,tau,rho,n,skipped,eta,seed,seconds_per_1000";

void write_rank_row(std::ostream& out, const CorrelationReport& rep) {
  out << to_string(rep.proxy) << "," << d17(rep.tau) << "," << d17(rep.rho) << "," << rep.n << ","
      << rep.skipped << "," << dg(rep.eta) << "," << rep.seed << ","
      << d17(rep.seconds_per_1000) << "\n";
}

int cmd_rank(const RankOpts& o) {
  const SpaceSpec space = resolve_space(o.common);
  const std::uint64_t seed = resolve_seed(o.common);
  const NamedBatch nb = make_batch(o.common, space, seed);
  const RankingDataset ds = load_dataset(o.dataset);
  EvalOptions opts;
  opts.space = space;
  opts.batch = nb.batch;
  opts.eta = o.common.eta;
  opts.seed = seed;
  opts.jobs = o.common.jobs;
  const CorrelationReport rep = evaluate_proxy(ds, parse_proxy(o.proxy), opts);
  Sink sink(o.common.out_path);
  provenance(sink.stream(), "rank", o.common, space, nb, seed);
  sink.stream() << "# dataset " << o.dataset << "\n";
  sink.stream() << rank_header << "\n";
  write_rank_row(sink.stream(), rep);
  return 0;
}

// ---- stability ------------------------------------------------------------

struct StabilityOpts {
  CommonOpts common;
  std::string dataset;
  std::string proxy = "v-pca";
  std::string mode = "seeds";
  int trials = 10;
  bool deciles = false;
};

int cmd_stability(const StabilityOpts& o) {
  const SpaceSpec space = resolve_space(o.common);
  const std::uint64_t seed = resolve_seed(o.common);
  const NamedBatch nb = make_batch(o.common, space, seed);
  RankingDataset ds = load_dataset(o.dataset, o.deciles);
  if (o.deciles) ds = select_deciles(ds);
  EvalOptions opts;
  opts.space = space;
  opts.batch = nb.batch;
  opts.eta = o.common.eta;
  opts.seed = seed;
  opts.jobs = o.common.jobs;
  const StabilityMode mode = o.mode == "batches" ? StabilityMode::batches : StabilityMode::seeds;
  const std::vector<StabilityRow> rows =
      stability_study(ds, parse_proxy(o.proxy), mode, o.trials, opts);
  Sink sink(o.common.out_path);
  provenance(sink.stream(), "stability", o.common, space, nb, seed);
  sink.stream() << "# proxy " << to_string(parse_proxy(o.proxy)) << " mode " << o.mode << " trials "
                << o.trials << (o.deciles ? " deciles" : "") << "\n";
  sink.stream() << "id,mean,stdev";
  for (int t = 1; t <= o.trials; ++t) sink.stream() << ",t" << t;
  sink.stream() << "\n";
  for (const StabilityRow& row : rows) {
    sink.stream() << "\"" << row.id << "\"," << d17(row.mean) << "," << d17(row.stdev);
    for (double v : row.values) sink.stream() << "," << d17(v);
    sink.stream() << "\n";
  }
  return 0;
}

// ---- eta-sweep ------------------------------------------------------------

struct SweepOpts {
  CommonOpts common;
  std::string dataset;
  std::vector<double> etas{0.9, 0.99, 0.999};
};

int cmd_eta_sweep(const SweepOpts& o) {
  const SpaceSpec space = resolve_space(o.common);
  const std::uint64_t seed = resolve_seed(o.common);
  const NamedBatch nb = make_batch(o.common, space, seed);
  const RankingDataset ds = load_dataset(o.dataset);
  EvalOptions opts;
  opts.space = space;
  opts.batch = nb.batch;
  opts.seed = seed;
  opts.jobs = o.common.jobs;
  const std::vector<CorrelationReport> rows = eta_sweep(ds, o.etas, opts);
  Sink sink(o.common.out_path);
  provenance(sink.stream(), "eta-sweep", o.common, space, nb, seed, /*with_eta=*/false);
  sink.stream() << "# dataset " << o.dataset << "\n";
  sink.stream() << "eta," << rank_header << "\n";
  for (const CorrelationReport& rep : rows) {
    sink.stream() << dg(rep.eta) << ",";
    write_rank_row(sink.stream(), rep);
  }
  return 0;
}

// ---- enumerate ------------------------------------------------------------

struct EnumerateOpts {
  CommonOpts common;
  std::string proxy = "w-pca";
};

int cmd_enumerate(const EnumerateOpts& o) {
  const SpaceSpec space = resolve_space(o.common);
  const std::int64_t count = space.genome_count();
  if (count > 100'000)
    throw config_error("enumerate: space holds " + std::to_string(count) +
                       " genomes, above the 100000 limit");
  const std::uint64_t seed = resolve_seed(o.common);
  const NamedBatch nb = make_batch(o.common, space, seed);
  const Proxy proxy = parse_proxy(o.proxy);

  const int range = 2 * space.n;
  std::vector<ProxyScore> rows(static_cast<std::size_t>(count));
  std::vector<ArchGenome> genomes(static_cast<std::size_t>(count));
  parallel_for(static_cast<std::size_t>(count), o.common.jobs, [&](std::size_t idx) {
    ArchGenome genome(static_cast<std::size_t>(space.m));
    std::int64_t rem = static_cast<std::int64_t>(idx);
    for (int g = space.m - 1; g >= 0; --g) {
      genome[static_cast<std::size_t>(g)] = static_cast<int>(rem % range);
      rem /= range;
    }
    const std::uint64_t wseed = derive_seed(seed, std::span<const int>(genome));
    const Model model = instantiate(decode(genome, space), wseed);
    ScoreOptions so;
    so.eta = o.common.eta;
    so.seed = wseed;
    so.batch_id = nb.id;
    rows[idx] = score_proxy(proxy, model, nb.batch, so);
    genomes[idx] = std::move(genome);
  });

  Sink sink(o.common.out_path);
  provenance(sink.stream(), "enumerate", o.common, space, nb, seed);
  sink.stream() << score_header << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i)
    write_score_rows(sink.stream(), format_genome(genomes[i]), {rows[i]});
  return 0;
}

// ---- synth ----------------------------------------------------------------

struct SynthOpts {
  CommonOpts common;
  int count = 200;
  std::string signal = "w-pca";
  double swap_fraction = 0.05;
  double rank_sigma = 0.0;
};

int cmd_synth(const SynthOpts& o) {
  const SpaceSpec space = resolve_space(o.common);
  const std::uint64_t seed = resolve_seed(o.common);
  const NamedBatch nb = make_batch(o.common, space, seed);
  SyntheticSpec spec;
  spec.count = o.count;
  spec.signal = parse_proxy(o.signal);
  spec.eta = o.common.eta;
  spec.swap_fraction = o.swap_fraction;
  spec.gauss_rank_sigma = o.rank_sigma;
  spec.seed = seed;
  spec.weight_seed = seed;
  spec.jobs = o.common.jobs;
  const RankingDataset ds = synthetic_dataset(space, nb.batch, spec);
  Sink sink(o.common.out_path);
  provenance(sink.stream(), "synth", o.common, space, nb, seed);
  sink.stream() << "# signal " << to_string(spec.signal) << " swap_fraction " << dg(o.swap_fraction)
                << " rank_sigma " << dg(o.rank_sigma) << " count " << o.count << "\n";
  save_dataset(ds, sink.stream());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"training-free transformer architecture scoring and search"};
  app.set_version_flag("--version", std::string("wpca ") + wpca::version);
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value file; command line flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);

  ScoreOpts score;
  CLI::App* score_cmd = app.add_subcommand("score", "score architectures with zero-shot proxies");
  score_cmd->add_option("--genome", score.genome_literal, "comma-separated genome literal");
  score_cmd->add_option("--arch-file", score.arch_file, "JSONL architecture list");
  score_cmd->add_option("--proxy", score.proxy_names, "proxies to compute")
      ->delimiter(',')
      ->capture_default_str();
  add_space_flags(score_cmd, score.common);
  add_batch_flags(score_cmd, score.common);
  add_run_flags(score_cmd, score.common);

  SearchOpts search;
  CLI::App* search_cmd = app.add_subcommand("search", "genetic search under the parameter cap");
  search_cmd->add_option("--fitness", search.fitness, "fitness proxy")->capture_default_str();
  search_cmd->add_option("--pop", search.ga.population, "population size")->capture_default_str();
  search_cmd->add_option("--gens", search.ga.generations, "generations")->capture_default_str();
  search_cmd->add_option("--cx", search.ga.crossover_prob, "crossover probability")
      ->capture_default_str();
  search_cmd->add_option("--mut", search.ga.mutation_prob, "per-gene mutation probability")
      ->capture_default_str();
  search_cmd->add_option("--pool", search.ga.parent_pool, "parent pool size")->capture_default_str();
  add_space_flags(search_cmd, search.common);
  add_batch_flags(search_cmd, search.common);
  add_run_flags(search_cmd, search.common);

  RankOpts rank;
  CLI::App* rank_cmd = app.add_subcommand("rank", "correlate a proxy against ground-truth scores");
  rank_cmd->add_option("--dataset", rank.dataset, "JSONL ranking dataset")->required();
  rank_cmd->add_option("--proxy", rank.proxy, "proxy to evaluate")->capture_default_str();
  add_space_flags(rank_cmd, rank.common);
  add_batch_flags(rank_cmd, rank.common);
  add_run_flags(rank_cmd, rank.common);

  StabilityOpts stability;
  CLI::App* stability_cmd =
      app.add_subcommand("stability", "per-architecture score dispersion across seeds or batches");
  stability_cmd->add_option("--dataset", stability.dataset, "JSONL architecture list")->required();
  stability_cmd->add_option("--proxy", stability.proxy, "proxy to evaluate")->capture_default_str();
  stability_cmd->add_option("--mode", stability.mode, "vary weight seeds or batches")
      ->check(CLI::IsMember({"seeds", "batches"}))
      ->capture_default_str();
  stability_cmd->add_option("--trials", stability.trials, "trials per architecture")
      ->check(CLI::Range(2, 1000000))
      ->capture_default_str();
  stability_cmd->add_flag("--deciles", stability.deciles,
                          "pick one architecture per ground-truth decile first");
  add_space_flags(stability_cmd, stability.common);
  add_batch_flags(stability_cmd, stability.common);
  add_run_flags(stability_cmd, stability.common);

  SweepOpts sweep;
  CLI::App* sweep_cmd = app.add_subcommand("eta-sweep", "v-pca and w-pca correlations across etas");
  sweep_cmd->add_option("--dataset", sweep.dataset, "JSONL ranking dataset")->required();
  sweep_cmd->add_option("--etas", sweep.etas, "eta values")->delimiter(',')->capture_default_str();
  add_space_flags(sweep_cmd, sweep.common);
  add_batch_flags(sweep_cmd, sweep.common);
  add_run_flags(sweep_cmd, sweep.common);

  EnumerateOpts enumerate;
  CLI::App* enumerate_cmd =
      app.add_subcommand("enumerate", "score every genome of a small space (oracle tables)");
  enumerate_cmd->add_option("--proxy", enumerate.proxy, "proxy to compute")->capture_default_str();
  add_space_flags(enumerate_cmd, enumerate.common);
  add_batch_flags(enumerate_cmd, enumerate.common);
  add_run_flags(enumerate_cmd, enumerate.common);

  SynthOpts synth;
  CLI::App* synth_cmd =
      app.add_subcommand("synth", "generate a synthetic ranking dataset from a proxy signal");
  synth_cmd->add_option("--count", synth.count, "architectures to draw")->capture_default_str();
  synth_cmd->add_option("--signal", synth.signal, "proxy behind the ground truth")
      ->capture_default_str();
  synth_cmd->add_option("--swap-fraction", synth.swap_fraction, "adjacent rank pairs to swap")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  synth_cmd->add_option("--rank-sigma", synth.rank_sigma, "Gaussian rank noise")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  add_space_flags(synth_cmd, synth.common);
  add_batch_flags(synth_cmd, synth.common);
  add_run_flags(synth_cmd, synth.common);

  int rc = 0;
  score_cmd->callback([&] { rc = cmd_score(score); });
  search_cmd->callback([&] { rc = cmd_search(search); });
  rank_cmd->callback([&] { rc = cmd_rank(rank); });
  stability_cmd->callback([&] { rc = cmd_stability(stability); });
  sweep_cmd->callback([&] { rc = cmd_eta_sweep(sweep); });
  enumerate_cmd->callback([&] { rc = cmd_enumerate(enumerate); });
  synth_cmd->callback([&] { rc = cmd_synth(synth); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int cli_rc = app.exit(e);
    return cli_rc == 0 ? 0 : 2;
  } catch (const wpca::codec_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const wpca::input_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const wpca::shape_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const wpca::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const wpca::numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return rc;
}
