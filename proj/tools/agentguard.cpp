// agentguard command line: corpus generation, feature export, training,
// evaluation, ablation, latency bench and the gating service.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "agentguard/pipeline.hpp"
#include "agentguard/service.hpp"

namespace fs = std::filesystem;
using namespace agentguard;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out) {
  c.out = default_out;
  cmd->add_option("--config", c.config_path, "pipeline config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "corpus seed (overrides config)");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
}

PipelineConfig resolve(const Common& c) {
  PipelineConfig cfg = c.config_path.empty() ? PipelineConfig{} : load_config(c.config_path);
  if (c.seed) cfg.gen.seed = *c.seed;
  cfg.gen.validate();
  cfg.train.validate();
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Every run leaves run.json in its output directory.
void write_run_manifest(const fs::path& dir, const std::string& command, const PipelineConfig& cfg,
                        const nlohmann::ordered_json& extra = nlohmann::ordered_json::object()) {
  fs::create_directories(dir);
  nlohmann::ordered_json m;
  m["command"] = command;
  m["resolved_config"] = nlohmann::json(cfg);
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_json(dir / "run.json", m);
}

Corpus corpus_or_generate(const std::string& dir, const PipelineConfig& cfg) {
  return dir.empty() ? gen_corpus(cfg.gen) : read_corpus(dir);
}

std::string model_dir_or_train(const std::string& dir, const Corpus& corpus, const PipelineConfig& cfg,
                               std::optional<TrainedDetector>& slot) {
  if (!dir.empty()) {
    slot = load_detector(dir);
    return dir;
  }
  slot = train_detector(corpus, cfg);
  return "<trained in-process>";
}

int run_gen(const Common& c, std::optional<std::size_t> n) {
  PipelineConfig cfg = resolve(c);
  if (n) cfg.gen.n_total = *n;
  cfg.gen.validate();
  const Corpus corpus = gen_corpus(cfg.gen);
  write_corpus(corpus, c.out);
  write_run_manifest(c.out, "gen", cfg, {{"corpus_manifest_hash", corpus_hash(corpus)}});
  std::cout << corpus_manifest(corpus)["counts"].dump(2) << '\n';
  return 0;
}

int run_extract(const Common& c, const std::string& corpus_dir) {
  const PipelineConfig cfg = resolve(c);
  const Corpus corpus = corpus_or_generate(corpus_dir, cfg);
  const fs::path out(c.out);
  fs::create_directories(out);
  const BenignProfile profile = fit_profile(corpus.train);
  write_json(out / "profile.json", nlohmann::json(profile));
  auto dump = [&](const char* name, const std::vector<Session>& split) {
    std::ofstream f(out / name, std::ios::binary);
    if (!f) throw Error("io-error", "cannot write " + (out / name).string());
    write_feature_header(f);
    std::size_t n = 0;
    for (const auto& row : extract_rows(split, profile, cfg.features)) {
      write_feature_row(f, row);
      ++n;
    }
    return n;
  };
  nlohmann::ordered_json rows;
  rows["train"] = dump("train.csv", corpus.train);
  rows["valid"] = dump("valid.csv", corpus.valid);
  rows["test"] = dump("test.csv", corpus.test);
  write_run_manifest(out, "extract", cfg, {{"corpus", corpus_dir}, {"rows", rows}});
  std::cout << rows.dump() << '\n';
  return 0;
}

int run_train(const Common& c, const std::string& corpus_dir, const std::string& features_dir) {
  const PipelineConfig cfg = resolve(c);
  TrainedDetector td;
  nlohmann::ordered_json source;
  if (!features_dir.empty()) {
    const fs::path dir(features_dir);
    auto load_rows = [&](const char* name) {
      std::ifstream in(dir / name, std::ios::binary);
      if (!in) throw Error("io-error", "cannot read " + (dir / name).string());
      return read_feature_csv(in);
    };
    std::ifstream pin(dir / "profile.json");
    if (!pin) throw Error("io-error", "cannot read " + (dir / "profile.json").string());
    td = train_from_features(load_rows("train.csv"), load_rows("valid.csv"),
                             nlohmann::json::parse(pin).get<BenignProfile>(), cfg);
    source["features"] = features_dir;
  } else {
    const Corpus corpus = corpus_or_generate(corpus_dir, cfg);
    td = train_detector(corpus, cfg);
    source["corpus"] = corpus_dir.empty() ? "<generated>" : corpus_dir;
    source["corpus_manifest_hash"] = corpus_hash(corpus);
  }
  save_detector(td, c.out, {{"source", source}});
  write_run_manifest(c.out, "train", cfg, {{"source", source}});
  if (td.calibration.warning) {
    std::cerr << "warning: no validation score meets the benign block cap; tau2 set to 1\n";
  }
  std::cout << "tau1 " << td.calibration.thresholds.tau1 << "  tau2 " << td.calibration.thresholds.tau2 << '\n';
  return 0;
}

int run_eval(const Common& c, const std::string& corpus_dir, const std::string& model_dir,
             const std::string& detector, bool latency) {
  const PipelineConfig cfg = resolve(c);
  const Corpus corpus = corpus_or_generate(corpus_dir, cfg);
  const std::string hash = corpus_hash(corpus);
  MetricsReport report;
  if (detector == "ours") {
    std::optional<TrainedDetector> td;
    model_dir_or_train(model_dir, corpus, cfg, td);
    StructuredDetector det(td->scorer());
    report = evaluate("ours", score_sessions(det, corpus.test), td->thresholds(), cfg.bootstrap, hash);
    report.calibration_warning = td->calibration.warning;
    if (latency) report.latency_p50_ms = measure_latency(det, corpus.test).p50_ms;
  } else {
    RuleFilterDetector det(cfg.rule_lexicon);
    const Calibration cal = calibrate_scored(score_sessions(det, corpus.valid), cfg.calibration);
    const Thresholds th = cfg.thresholds.value_or(cal.thresholds);
    report = evaluate("rule_filter", score_sessions(det, corpus.test), th, cfg.bootstrap, hash);
    report.calibration_warning = cal.warning && !cfg.thresholds;
    if (latency) report.latency_p50_ms = measure_latency(det, corpus.test).p50_ms;
  }
  const fs::path out(c.out);
  fs::create_directories(out);
  write_json(out / "report.json", report_to_json(report));
  {
    std::ofstream f(out / "report.txt", std::ios::binary);
    f << report_to_text(report);
    std::ofstream csv(out / "family.csv", std::ios::binary);
    csv << "detector,family,attack_success\n";
    for (const auto& [fam, v] : report.family_success) csv << report.detector << ',' << family_name(fam) << ',' << v << '\n';
  }
  write_run_manifest(out, "eval", cfg, {{"detector", detector}, {"model", model_dir}, {"corpus", corpus_dir}});
  std::cout << report_to_text(report);
  return 0;
}

int run_ablate(const Common& c, const std::string& corpus_dir) {
  const PipelineConfig cfg = resolve(c);
  const Corpus corpus = corpus_or_generate(corpus_dir, cfg);
  const auto specs = default_ablation_specs();
  const auto rows = run_ablation(corpus, specs, cfg);
  const fs::path out(c.out);
  fs::create_directories(out);
  {
    std::ofstream f(out / "ablation.txt", std::ios::binary);
    f << ablation_to_text(rows);
    std::ofstream csv(out / "ablation.csv", std::ios::binary);
    csv << ablation_to_csv(rows);
  }
  write_json(out / "ablation.json", ablation_to_json(rows));
  write_run_manifest(out, "ablate", cfg, {{"corpus", corpus_dir}, {"corpus_manifest_hash", corpus_hash(corpus)}});
  std::cout << ablation_to_text(rows);
  return 0;
}

int run_bench(const Common& c, const std::string& corpus_dir, const std::string& model_dir, std::size_t concurrency) {
  const PipelineConfig cfg = resolve(c);
  const Corpus corpus = corpus_or_generate(corpus_dir, cfg);
  std::optional<TrainedDetector> td;
  model_dir_or_train(model_dir, corpus, cfg, td);
  StructuredDetector ours(td->scorer());
  RuleFilterDetector rule(cfg.rule_lexicon);
  const LatencyStats off = measure_latency(ours, corpus.test);
  const LatencyStats off_rule = measure_latency(rule, corpus.test);
  Gateway gateway(td->scorer(), td->thresholds());
  const ServiceBenchResult svc = bench_service(gateway, corpus.test, concurrency);

  nlohmann::ordered_json j;
  j["offline"] = {{"detector", "ours"}, {"prefixes", off.prefixes}, {"p50_ms", off.p50_ms}, {"p95_ms", off.p95_ms}};
  j["offline_rule_filter"] = {{"prefixes", off_rule.prefixes}, {"p50_ms", off_rule.p50_ms}, {"p95_ms", off_rule.p95_ms}};
  j["service"] = {{"transport", "tcp-loopback"},
                  {"concurrency", svc.concurrency},
                  {"requests", svc.requests},
                  {"round_trip_p50_ms", svc.round_trip_p50_ms},
                  {"round_trip_p95_ms", svc.round_trip_p95_ms},
                  {"score_p50_ms", svc.score_p50_ms}};
  const fs::path out(c.out);
  fs::create_directories(out);
  write_json(out / "bench.json", j);
  write_run_manifest(out, "bench", cfg, {{"model", model_dir}, {"corpus", corpus_dir}});
  std::printf("offline p50 %.4f ms  p95 %.4f ms  (%zu prefixes)\n", off.p50_ms, off.p95_ms, off.prefixes);
  std::printf("rule filter p50 %.4f ms\n", off_rule.p50_ms);
  std::printf("service p50 %.4f ms round trip, %.4f ms scoring  (%zu sessions concurrent, %zu requests)\n",
              svc.round_trip_p50_ms, svc.score_p50_ms, svc.concurrency, svc.requests);
  return 0;
}

std::atomic<bool> g_stop{false};

int run_serve(const Common& c, const std::string& model_dir, std::optional<std::uint16_t> port,
              std::string audit_path, double idle_seconds, bool debug) {
  const PipelineConfig cfg = resolve(c);
  if (model_dir.empty()) throw Error("bad-config", "serve needs --model");
  const TrainedDetector td = load_detector(model_dir);
  const Thresholds th = cfg.thresholds.value_or(td.thresholds());
  const fs::path out(c.out);
  if (audit_path.empty()) audit_path = (out / "audit.jsonl").string();
  write_run_manifest(out, "serve", cfg,
                     {{"model", model_dir}, {"audit_log", audit_path}, {"thresholds", nlohmann::json(th)}});
  std::ofstream audit_file(audit_path, std::ios::app | std::ios::binary);
  if (!audit_file) throw Error("io-error", "cannot open audit log " + audit_path);
  AuditLog audit(&audit_file);
  ServiceConfig scfg;
  scfg.idle_timeout = std::chrono::milliseconds(static_cast<std::int64_t>(idle_seconds * 1000));
  scfg.debug = debug;
  Gateway gateway(td.scorer(), th, scfg, &audit);
  if (!port) {
    std::ios::sync_with_stdio(false);
    serve_stream(gateway, std::cin, std::cout);
    return 0;
  }
  TcpServer server(gateway, *port);
  std::cerr << "listening on 127.0.0.1:" << server.port() << std::endl;
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  server.start();
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    gateway.expire_idle();
  }
  server.stop();
  return 0;
}

int run_score(const Common& c, const std::string& model_dir, const std::string& traces) {
  const PipelineConfig cfg = resolve(c);
  if (model_dir.empty()) throw Error("bad-config", "score needs --model");
  const TrainedDetector td = load_detector(model_dir);
  const Thresholds th = cfg.thresholds.value_or(td.thresholds());
  const auto sessions = read_sessions_file(traces);
  Gateway gateway(td.scorer(), th);
  const fs::path out(c.out);
  fs::create_directories(out);
  std::ofstream f(out / "decisions.jsonl", std::ios::binary);
  std::size_t n = 0;
  for (const Session& s : sessions) {
    for (const Turn& t : s.turns) {
      ScoreResponse r = gateway.score({s.session_id, t, false});
      r.latency_us = 0;
      nlohmann::ordered_json j = response_to_json(r);
      j.erase("latency_us");
      f << j.dump() << '\n';
      std::cout << j.dump() << '\n';
      ++n;
    }
  }
  write_run_manifest(out, "score", cfg, {{"model", model_dir}, {"traces", traces}, {"decisions", n}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agentguard: structured runtime detection for multi-turn agent sessions"};
  app.require_subcommand(1);

  Common gen_c, ext_c, train_c, eval_c, abl_c, bench_c, serve_c, score_c;
  std::optional<std::size_t> gen_n;
  std::string corpus_dir, features_dir, model_dir, detector = "ours", audit_path, traces;
  bool latency = false;
  bool debug = false;
  std::size_t concurrency = 16;
  std::optional<std::uint16_t> port;
  double idle_seconds = 600;

  auto* gen = app.add_subcommand("gen", "generate a labeled corpus (train/valid/test JSON lines)");
  add_common(gen, gen_c, "corpus");
  gen->add_option("--n", gen_n, "total sessions");

  auto* ext = app.add_subcommand("extract", "export per-prefix feature matrices as CSV");
  add_common(ext, ext_c, "features");
  ext->add_option("--corpus", corpus_dir, "corpus directory (generated from config when omitted)");

  auto* trn = app.add_subcommand("train", "train the detector and calibrate thresholds");
  add_common(trn, train_c, "model");
  trn->add_option("--corpus", corpus_dir, "corpus directory");
  trn->add_option("--features", features_dir, "feature directory written by extract")->excludes("--corpus");

  auto* evl = app.add_subcommand("eval", "evaluate a detector on the test split");
  add_common(evl, eval_c, "eval");
  evl->add_option("--corpus", corpus_dir, "corpus directory");
  evl->add_option("--model", model_dir, "model directory (trained in-process when omitted)");
  evl->add_option("--detector", detector, "ours or rule_filter")->check(CLI::IsMember({"ours", "rule_filter"}));
  evl->add_flag("--latency", latency, "also measure per-prefix latency (non-deterministic field)");

  auto* abl = app.add_subcommand("ablate", "isolated and leave-one-out feature-group ablation");
  add_common(abl, abl_c, "ablation");
  abl->add_option("--corpus", corpus_dir, "corpus directory");

  auto* bch = app.add_subcommand("bench", "offline and service latency");
  add_common(bch, bench_c, "bench");
  bch->add_option("--corpus", corpus_dir, "corpus directory");
  bch->add_option("--model", model_dir, "model directory");
  bch->add_option("--concurrency", concurrency, "concurrent sessions for the service run")->capture_default_str();

  auto* srv = app.add_subcommand("serve", "gating service over stdio, or TCP with --port");
  add_common(srv, serve_c, "serve");
  srv->add_option("--model", model_dir, "model directory")->required();
  srv->add_option("--port", port, "listen on 127.0.0.1:PORT (0 picks one) instead of stdio");
  srv->add_option("--audit", audit_path, "audit log path (default OUT/audit.jsonl)");
  srv->add_option("--idle-timeout", idle_seconds, "seconds before an idle session is dropped")->capture_default_str();
  srv->add_flag("--debug", debug, "include named features in every response");

  auto* scr = app.add_subcommand("score", "score every turn of a trace file");
  add_common(scr, score_c, "score");
  scr->add_option("--model", model_dir, "model directory")->required();
  scr->add_option("--traces", traces, "session JSON lines")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return run_gen(gen_c, gen_n);
    if (*ext) return run_extract(ext_c, corpus_dir);
    if (*trn) return run_train(train_c, corpus_dir, features_dir);
    if (*evl) return run_eval(eval_c, corpus_dir, model_dir, detector, latency);
    if (*abl) return run_ablate(abl_c, corpus_dir);
    if (*bch) return run_bench(bench_c, corpus_dir, model_dir, concurrency);
    if (*srv) return run_serve(serve_c, model_dir, port, audit_path, idle_seconds, debug);
    if (*scr) return run_score(score_c, model_dir, traces);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
