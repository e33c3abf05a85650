// fkac: benchmarks, training, gradient checks and filter-response export.
//
// Exit codes: 0 success, 1 failed check, 2 usage or configuration error.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fkaconv/bench.hpp"
#include "fkaconv/checkpoint.hpp"
#include "fkaconv/cloud_io.hpp"
#include "fkaconv/experiment.hpp"
#include "fkaconv/gradcheck.hpp"
#include "fkaconv/netzoo.hpp"
#include "fkaconv/parallel.hpp"
#include "fkaconv/train.hpp"

#ifndef FKAC_BUILD_ID
#define FKAC_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace fkac;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// One manifest per run, written next to the outputs.
struct Manifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::string started = utc_now();
  std::vector<std::string> outputs;

  void write(const fs::path& path) const {
    json j{{"command", command},  {"config", config},   {"seed", seed},          {"build", FKAC_BUILD_ID},
           {"started", started},  {"finished", utc_now()}, {"outputs", outputs}};
    ensure_parent(path);
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

fs::path manifest_beside(const fs::path& out) {
  auto m = out;
  m += ".manifest.json";
  return m;
}

// Fills options that were not given on the command line from a JSON object
// whose keys are long option names.
void apply_json_options(CLI::App& sub, const std::string& config_path) {
  if (config_path.empty()) return;
  const json j = read_json(config_path);
  if (!j.is_object()) throw ConfigError(config_path + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = nullptr;
    try {
      opt = sub.get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      throw ConfigError("field '" + key + "': not an option of " + sub.get_name());
    }
    if (opt->count() > 0 || key == "config") continue;
    std::vector<std::string> items;
    auto text = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + text(v);
      items.push_back(joined);
    } else if (value.is_boolean()) {
      if (!value.get<bool>()) continue;
      items.push_back("true");
    } else {
      items.push_back(text(value));
    }
    try {
      for (const auto& s : items) opt->add_result(s);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError("field '" + key + "': " + e.what());
    }
  }
}

std::vector<Strategy> parse_strategies(const std::vector<std::string>& names) {
  std::vector<Strategy> out;
  for (const auto& n : names) out.push_back(parse_strategy(n));
  return out;
}

json strategies_json(const std::vector<std::string>& names) { return json(names); }

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::vector<std::size_t> sizes{10000};
  std::vector<std::string> strategies{"random", "quantized", "fps", "rejection"};
  std::size_t repeats = 20, warmup = 3, k = 16;
  std::uint64_t seed = 0;
  std::string out = "sample_bench.csv";
  std::string config;
};

int run_sample_bench(const BenchArgs& a) {
  BenchOptions o;
  o.sizes = a.sizes;
  o.strategies = parse_strategies(a.strategies);
  o.repeats = a.repeats;
  o.warmup = a.warmup;
  o.k = a.k;
  o.seed = a.seed;
  const auto rows = bench_sampling(o);
  const fs::path out = a.out;
  ensure_parent(out);
  write_file_atomic(out, sample_bench_csv(rows));
  Manifest m;
  m.command = "sample-bench";
  m.seed = a.seed;
  m.config = {{"sizes", a.sizes}, {"strategies", strategies_json(a.strategies)}, {"repeats", a.repeats},
              {"warmup", a.warmup}, {"k", a.k}, {"threads", num_threads()}};
  m.outputs = {out.string()};
  m.write(manifest_beside(out));
  std::cout << sample_bench_csv(rows);
  return 0;
}

struct VoxelArgs {
  std::size_t scenes = 50, points = 8192;
  std::vector<std::size_t> q_counts{64, 256, 1024};
  std::string kind = "planar_room";
  bool fixed_orientation = false;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  std::string out = "voxel_rule.csv";
  std::string config;
};

int run_voxel_rule(const VoxelArgs& a) {
  VoxelRuleOptions o;
  o.n_scenes = a.scenes;
  o.q_counts = a.q_counts;
  o.n_points = a.points;
  o.kind = parse_scene_kind(a.kind);
  o.random_yaw = !a.fixed_orientation;
  o.tolerance = a.tolerance;
  o.seed = a.seed;
  const auto rows = voxel_rule_study(o);
  const fs::path out = a.out;
  ensure_parent(out);
  write_file_atomic(out, voxel_rule_csv(rows));
  Manifest m;
  m.command = "voxel-rule";
  m.seed = a.seed;
  m.config = {{"scenes", a.scenes}, {"q_counts", a.q_counts}, {"points", a.points}, {"kind", a.kind},
              {"fixed_orientation", a.fixed_orientation}, {"tolerance", a.tolerance}};
  m.outputs = {out.string()};
  m.write(manifest_beside(out));
  const auto s = summarize(rows);
  std::cout << "rows " << rows.size() << " rule_at_least_optimal " << s.rule_at_least_optimal
            << " at_most_two_iterations " << s.at_most_two_iterations << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out = "run";
  std::string resume;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

std::string metrics_header() { return "epoch,lr,train_loss,train_accuracy,test_accuracy,seconds\n"; }

std::string metrics_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(8) << m.epoch << ',' << m.lr << ',' << m.train_loss << ',' << m.train_accuracy << ','
     << m.test_accuracy << ',' << m.seconds << '\n';
  return os.str();
}

// Rows of an earlier metrics.csv with epoch < first.
std::string kept_metrics(const fs::path& p, std::size_t first) {
  if (!fs::exists(p)) return {};
  std::istringstream is(read_text(p));
  std::string line, out;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) < first) out += line + "\n";
  }
  return out;
}

int run_train(const TrainArgs& a) {
  json cfg_json = read_json(a.config);
  RunConfig cfg = run_config_from_json(cfg_json);
  if (a.seed_given) {
    cfg.train.seed = a.seed;
    cfg.network.seed = a.seed;
  }
  const fs::path dir = a.out;
  fs::create_directories(dir);
  const auto metrics_path = dir / "metrics.csv", best_path = dir / "best.ckpt", final_path = dir / "final.ckpt";

  std::size_t first_epoch = 0;
  double best = -1;
  Network<float> net(cfg.network);
  if (!a.resume.empty()) {
    const auto ck = load_checkpoint(a.resume);
    const json meta = json::parse(ck.metadata);
    if (!meta.contains("config") || network_config_from_json(meta["config"]).widths != cfg.network.widths)
      throw ConfigError("resume checkpoint does not match the configured network");
    net.restore(ck);
    first_epoch = meta.value("epoch", std::size_t{0}) + 1;
    best = meta.value("best_accuracy", -1.0);
    if (first_epoch >= cfg.train.epochs)
      throw ConfigError("field 'train.epochs': checkpoint already covers " + std::to_string(first_epoch) + " epochs");
  }

  const auto [train, test] = make_datasets(cfg.data);
  std::string metrics = metrics_header() + kept_metrics(metrics_path, first_epoch);
  write_file_atomic(metrics_path, metrics);
  fit(net, train, test, cfg.train, first_epoch, [&](const EpochMetrics& m) {
    metrics += metrics_row(m);
    write_file_atomic(metrics_path, metrics);
    const double score = m.test_accuracy >= 0 ? m.test_accuracy : m.train_accuracy;
    const json extra{{"epoch", m.epoch}, {"best_accuracy", std::max(best, score)}, {"run", to_json(cfg)}};
    if (score > best) {
      best = score;
      net.save(best_path, extra);
    }
    net.save(final_path, extra);
    std::cout << "epoch " << m.epoch << " loss " << m.train_loss << " train_acc " << m.train_accuracy << " test_acc "
              << m.test_accuracy << " (" << m.seconds << " s)" << std::endl;
  });

  Manifest man;
  man.command = "train";
  man.config = to_json(cfg);
  man.config["resume"] = a.resume;
  man.seed = cfg.train.seed;
  man.outputs = {metrics_path.string(), best_path.string(), final_path.string()};
  man.write(dir / "manifest.json");
  return 0;
}

// ---------------------------------------------------------------------------

struct GradArgs {
  std::uint64_t seed = 0;
  std::string corrupt;
  std::string out;
};

int run_gradcheck_cmd(const GradArgs& a) {
  GradCheckOptions o;
  o.seeds = {a.seed, a.seed + 1, a.seed + 2};
  o.corrupt_op = a.corrupt;
  const auto report = run_gradcheck(o);
  const std::string text = report.format();
  std::cout << text;
  if (!a.out.empty()) {
    const fs::path out = a.out;
    ensure_parent(out);
    write_file_atomic(out, text);
    Manifest m;
    m.command = "gradcheck";
    m.seed = a.seed;
    m.config = {{"seeds", o.seeds}, {"corrupt", a.corrupt}, {"op_tolerance", o.op_tolerance},
                {"stack_tolerance", o.stack_tolerance}};
    m.outputs = {out.string()};
    m.write(manifest_beside(out));
  }
  return report.passed() ? 0 : kExitCheckFailed;
}

// ---------------------------------------------------------------------------

PointCloud read_cloud(const std::string& path, bool with_labels = false) {
  return load_cloud(path, format_from_path(path), with_labels);
}

struct InferArgs {
  std::string checkpoint, cloud;
  std::size_t votes = 1;
  std::uint64_t seed = 0;
  std::string out = "predictions.csv";
};

int run_infer(const InferArgs& a) {
  auto net = Network<float>::load(a.checkpoint);
  const auto cloud = read_cloud(a.cloud);
  std::ostringstream os;
  os << std::setprecision(8);
  if (net.config().task == Task::kClassification) {
    const auto r = classify(net, cloud, a.votes, a.seed);
    os << "class,mean_score,votes\n";
    for (std::size_t c = 0; c < r.mean_scores.size(); ++c)
      os << c << ',' << r.mean_scores[c] << ',' << std::count(r.votes.begin(), r.votes.end(), static_cast<int>(c))
         << '\n';
    std::cout << "label " << r.label << "\n";
  } else {
    const auto labels = segment(net, cloud, a.seed);
    os << "x,y,z,label\n";
    for (std::size_t i = 0; i < cloud.size(); ++i)
      os << cloud.coords[i][0] << ',' << cloud.coords[i][1] << ',' << cloud.coords[i][2] << ',' << labels[i] << '\n';
  }
  const fs::path out = a.out;
  ensure_parent(out);
  write_file_atomic(out, os.str());
  Manifest m;
  m.command = "infer";
  m.seed = a.seed;
  m.config = {{"checkpoint", a.checkpoint}, {"cloud", a.cloud}, {"votes", a.votes}};
  m.outputs = {out.string()};
  m.write(manifest_beside(out));
  return 0;
}

struct FilterArgs {
  std::string checkpoint, cloud;
  std::size_t layer = 0, filter = 0;
  std::uint64_t seed = 0;
  std::string out = "filter_response.csv";
};

int run_filter_response(const FilterArgs& a) {
  auto net = Network<float>::load(a.checkpoint);
  const auto cloud = read_cloud(a.cloud);
  const auto resp = filter_response(net, cloud, a.layer, a.filter, a.seed);
  std::ostringstream os;
  os << std::setprecision(9) << "x,y,z,response\n";
  for (std::size_t i = 0; i < cloud.size(); ++i)
    os << cloud.coords[i][0] << ',' << cloud.coords[i][1] << ',' << cloud.coords[i][2] << ',' << resp[i] << '\n';
  const fs::path out = a.out;
  ensure_parent(out);
  write_file_atomic(out, os.str());
  Manifest m;
  m.command = "filter-response";
  m.seed = a.seed;
  m.config = {{"checkpoint", a.checkpoint}, {"cloud", a.cloud}, {"layer", a.layer}, {"filter", a.filter}};
  m.outputs = {out.string()};
  m.write(manifest_beside(out));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FKAConv point-cloud convolution toolkit"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (overrides FKAC_THREADS; default 1)")->check(CLI::PositiveNumber);

  BenchArgs bench;
  auto* sb = app.add_subcommand("sample-bench", "time support selection plus k-NN on uniform-cube clouds");
  sb->add_option("--sizes", bench.sizes, "cloud sizes")->delimiter(',')->capture_default_str();
  sb->add_option("--strategies", bench.strategies, "random, quantized, fps, rejection")->delimiter(',');
  sb->add_option("--repeats", bench.repeats, "timed runs per cell (median reported)")->capture_default_str();
  sb->add_option("--warmup", bench.warmup, "untimed runs per cell")->capture_default_str();
  sb->add_option("--k", bench.k, "neighbors per support")->capture_default_str();
  sb->add_option("--seed", bench.seed, "cloud and sampler seed")->capture_default_str();
  sb->add_option("--out", bench.out, "CSV path")->capture_default_str();
  sb->add_option("--config", bench.config, "JSON object of option values");

  VoxelArgs vox;
  auto* vr = app.add_subcommand("voxel-rule", "compare the voxel-size rule with the dichotomic optimum");
  vr->add_option("--scenes", vox.scenes, "number of scenes")->capture_default_str();
  vr->add_option("--q-counts", vox.q_counts, "support counts")->delimiter(',');
  vr->add_option("--points", vox.points, "points per scene")->capture_default_str();
  vr->add_option("--kind", vox.kind, "scene kind")->capture_default_str();
  vr->add_flag("--fixed-orientation", vox.fixed_orientation, "no random yaw");
  vr->add_option("--tolerance", vox.tolerance, "dichotomy tolerance relative to the diagonal")->capture_default_str();
  vr->add_option("--seed", vox.seed, "scene seed")->capture_default_str();
  vr->add_option("--out", vox.out, "CSV path")->capture_default_str();
  vr->add_option("--config", vox.config, "JSON object of option values");

  TrainArgs tr;
  auto* tn = app.add_subcommand("train", "train a network on synthetic data");
  tn->add_option("--config", tr.config, "run config JSON")->required()->check(CLI::ExistingFile);
  tn->add_option("--out", tr.out, "output directory")->capture_default_str();
  tn->add_option("--resume", tr.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  auto* train_seed = tn->add_option("--seed", tr.seed, "overrides train.seed and network.seed");

  GradArgs gc;
  auto* gr = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gr->add_option("--seed", gc.seed, "first of three seeds")->capture_default_str();
  gr->add_option("--corrupt", gc.corrupt, "test fixture: break one backward (sigmoid)");
  gr->add_option("--out", gc.out, "report path");

  InferArgs inf;
  auto* in = app.add_subcommand("infer", "classify or segment a PLY/XYZ cloud");
  in->add_option("--checkpoint", inf.checkpoint)->required()->check(CLI::ExistingFile);
  in->add_option("--cloud", inf.cloud)->required()->check(CLI::ExistingFile);
  in->add_option("--votes", inf.votes, "evaluation passes (classification)")->capture_default_str();
  in->add_option("--seed", inf.seed, "sampling seed")->capture_default_str();
  in->add_option("--out", inf.out, "CSV path")->capture_default_str();

  FilterArgs fr;
  auto* fi = app.add_subcommand("filter-response", "export one filter's activation at full resolution");
  fi->add_option("--checkpoint", fr.checkpoint)->required()->check(CLI::ExistingFile);
  fi->add_option("--cloud", fr.cloud)->required()->check(CLI::ExistingFile);
  fi->add_option("--layer", fr.layer, "0 is the stem, i is residual block i")->capture_default_str();
  fi->add_option("--filter", fr.filter, "channel index")->capture_default_str();
  fi->add_option("--seed", fr.seed, "sampling seed")->capture_default_str();
  fi->add_option("--out", fr.out, "CSV path")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (threads > 0) set_num_threads(threads);
    if (sb->parsed()) {
      apply_json_options(*sb, bench.config);
      return run_sample_bench(bench);
    }
    if (vr->parsed()) {
      apply_json_options(*vr, vox.config);
      if (vox.q_counts.empty()) throw ParameterError("voxel-rule needs at least one q_count");
      return run_voxel_rule(vox);
    }
    if (tn->parsed()) {
      tr.seed_given = train_seed->count() > 0;
      return run_train(tr);
    }
    if (gr->parsed()) return run_gradcheck_cmd(gc);
    if (in->parsed()) return run_infer(inf);
    if (fi->parsed()) return run_filter_response(fr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
