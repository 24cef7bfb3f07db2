// card-router: command-line front end over the cardroute C API.

#include "cardroute/cardroute.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <optional>
#include <pthread.h>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitError = 2;
constexpr int kExitUsage = 64;
constexpr int kExitIo = 74;

int exit_for(cr_status s) {
  switch (s) {
    case CR_OK: return kExitOk;
    case CR_ERR_FILE_MISSING:
    case CR_ERR_IO: return kExitIo;
    default: return kExitError;
  }
}

// Thrown to unwind with a specific exit status after the message is printed.
struct Exit {
  int code;
};

void check(cr_status s, const std::string& what) {
  if (s == CR_OK) return;
  std::cerr << "error: " << what << ": " << cr_status_name(s) << ": " << cr_last_error() << "\n";
  throw Exit{exit_for(s)};
}

// Takes ownership of a string returned by the C API.
std::string take(char* s) {
  std::string out = s ? s : "";
  cr_string_free(s);
  return out;
}

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Repo = std::unique_ptr<cr_repository, Deleter<cr_repository, cr_repository_free>>;
using Backend = std::unique_ptr<cr_backend, Deleter<cr_backend, cr_backend_free>>;
using Templates = std::unique_ptr<cr_templates, Deleter<cr_templates, cr_templates_free>>;
using Store = std::unique_ptr<cr_audit_store, Deleter<cr_audit_store, cr_audit_store_free>>;
using Service = std::unique_ptr<cr_service, Deleter<cr_service, cr_service_free>>;

struct CommonOptions {
  std::string cards = "data/cards.jsonl";
  std::string backend = "scripted";
  std::string script = "data/scenarios.jsonl";
  std::string remote_url;
  std::string remote_model;
  std::string templates;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--cards", o.cards, "Model-card JSONL file")->capture_default_str();
  cmd->add_option("--backend", o.backend, "Backend kind")
      ->check(CLI::IsMember({"scripted", "remote"}))
      ->capture_default_str();
  cmd->add_option("--script", o.script, "Scripted-backend fixture (JSONL)")->capture_default_str();
  cmd->add_option("--backend-url", o.remote_url, "Inference server base URL (remote backend)");
  cmd->add_option("--model", o.remote_model, "Model name sent to the inference server");
  cmd->add_option("--templates", o.templates, "Prompt template directory (default: builtin)");
}

Repo open_repo(const CommonOptions& o) {
  cr_repository* r = nullptr;
  check(cr_repository_load(o.cards.c_str(), &r), "loading " + o.cards);
  return Repo(r);
}

Backend open_backend(const CommonOptions& o) {
  cr_backend* b = nullptr;
  if (o.backend == "scripted") {
    check(cr_backend_open_scripted(o.script.c_str(), &b), "loading " + o.script);
  } else {
    const json cfg = {{"base_url", o.remote_url}, {"model", o.remote_model}};
    check(cr_backend_open_remote(cfg.dump().c_str(), &b), "configuring remote backend");
  }
  return Backend(b);
}

Templates open_templates(const CommonOptions& o) {
  if (o.templates.empty()) return Templates(nullptr);
  cr_templates* t = nullptr;
  check(cr_templates_load(o.templates.c_str(), &t), "loading templates from " + o.templates);
  return Templates(t);
}

std::string clip(std::string s, std::size_t width) {
  if (s.size() > width) s = s.substr(0, width - 3) + "...";
  return s;
}

std::string fmt_prob(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", p);
  return buf;
}

void print_stage_table(const json& record) {
  std::printf("%-6s %-8s %-30s %-30s %-10s %s\n", "stage", "cutoff", "top", "runner-up", "verdict", "reason");
  for (const auto& s : record.at("stages")) {
    const int stage = s.at("stage").get<int>();
    if (s.value("skipped", false)) {
      std::printf("%-6d %-8s %s\n", stage, fmt_prob(s.at("cutoff").get<double>()).c_str(),
                  "(skipped: no candidate cards for this modality)");
      continue;
    }
    auto cell = [&](std::size_t i) {
      const auto& c = s.at("top2").at(i);
      return clip(c.at("text").get<std::string>(), 21) + " (" + fmt_prob(c.at("prob").get<double>()) + ")";
    };
    const auto& d = s.at("decision");
    std::printf("%-6d %-8s %-30s %-30s %-10s %s\n", stage, fmt_prob(s.at("cutoff").get<double>()).c_str(),
                cell(0).c_str(), cell(1).c_str(), d.at("verdict").get<std::string>().c_str(),
                d.at("reason").get<std::string>().c_str());
  }
}

std::string describe(const json& outcome) {
  if (outcome.at("kind") == "Selected") return "Selected " + outcome.at("card_id").get<std::string>();
  return "Abstained at Stage " + std::to_string(outcome.at("stage").get<int>()) + " (" +
         outcome.at("token").get<std::string>() + ")";
}

// Expected label from --expect (a card id or an abstention token) or from a
// labeled-case file entry for the case.
std::optional<std::string> expected_label(const std::string& expect, const std::string& cases_path,
                                          const std::string& case_id) {
  if (!expect.empty()) return expect;
  if (cases_path.empty() || case_id.empty()) return std::nullopt;
  std::ifstream in(cases_path);
  if (!in) {
    std::cerr << "error: cannot read " << cases_path << "\n";
    throw Exit{kExitIo};
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json c = json::parse(line, nullptr, false);
    if (c.is_discarded() || c.value("case_id", "") != case_id) continue;
    if (c.value("expected_kind", "") == "Selected") return c.value("expected_id", "");
    return c.value("expected_token", std::string("None"));
  }
  return std::nullopt;
}

bool label_matches(const json& outcome, const std::string& label) {
  if (outcome.at("kind") == "Selected") return outcome.at("card_id") == label;
  return label.rfind("MODEL_", 0) != 0;
}

std::vector<unsigned char> read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::cerr << "error: cannot read " << path << "\n";
    throw Exit{kExitIo};
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct RouteArgs {
  CommonOptions common;
  std::string target;
  std::string case_id;
  std::optional<double> tau1, tau2, tau3;
  bool global_abstain = false;
  std::size_t top_k = 0;
  std::string expect;
  std::string cases;
  std::string audit;
  bool json_out = false;
};

int run_route(const RouteArgs& a) {
  std::string case_id = a.case_id;
  std::vector<unsigned char> image;
  if (!a.target.empty()) {
    if (std::filesystem::is_regular_file(a.target)) {
      image = read_binary(a.target);
      if (case_id.empty()) case_id = std::filesystem::path(a.target).stem().string();
    } else if (case_id.empty()) {
      case_id = a.target;
    } else {
      std::cerr << "error: image file not found: " << a.target << "\n";
      return kExitIo;
    }
  }
  if (case_id.empty() && image.empty()) {
    std::cerr << "error: give an image path or --case\n";
    return kExitUsage;
  }

  Repo repo = open_repo(a.common);
  Backend backend = open_backend(a.common);
  Templates templates = open_templates(a.common);

  cr_route_params params = cr_default_route_params();
  params.case_id = case_id.c_str();
  if (!image.empty()) {
    params.image = image.data();
    params.image_len = image.size();
  }
  if (a.tau1) params.thresholds.tau1 = *a.tau1;
  if (a.tau2) params.thresholds.tau2 = *a.tau2;
  if (a.tau3) params.thresholds.tau3 = *a.tau3;
  params.global_abstain_set = a.global_abstain ? 1 : 0;
  params.top_k = a.top_k;

  char* raw = nullptr;
  const cr_status status = cr_route(repo.get(), backend.get(), templates.get(), &params, &raw);
  const std::string text = take(raw);
  const json result = text.empty() ? json() : json::parse(text);

  if (!a.audit.empty() && result.contains("decision_record")) {
    cr_audit_store* s = nullptr;
    check(cr_audit_store_open(a.audit.c_str(), &s), "opening audit store " + a.audit);
    Store store(s);
    check(cr_audit_store_append(store.get(), result["decision_record"].dump().c_str()), "appending audit record");
  }

  if (status != CR_OK) {
    std::cerr << "error: routing failed: " << cr_status_name(status) << ": " << cr_last_error() << "\n";
    if (a.json_out && !result.is_null()) std::cout << result.dump(2) << "\n";
    return exit_for(status);
  }
  if (a.json_out) {
    std::cout << result.dump(2) << "\n";
    return kExitOk;
  }

  const json& outcome = result.at("outcome");
  const json& record = result.at("decision_record");
  std::cout << describe(outcome) << "\n";
  if (const auto label = expected_label(a.expect, a.cases, case_id)) {
    std::cout << "expected: " << *label << " -> " << (label_matches(outcome, *label) ? "MATCH" : "MISMATCH") << "\n";
  }
  std::cout << "\n";
  print_stage_table(record);
  if (!record.value("justification", "").empty()) {
    std::cout << "\njustification: " << record["justification"].get<std::string>() << "\n";
  }
  for (const auto& w : record.value("warnings", json::array())) std::cout << "warning: " << w.get<std::string>() << "\n";
  std::cout << "\nrecord: " << record.at("request_id").get<std::string>() << "\n";
  return kExitOk;
}

int run_validate(const std::string& path) {
  char* raw = nullptr;
  check(cr_validate_cards(path.c_str(), &raw), "validating " + path);
  const json diags = json::parse(take(raw));
  for (const auto& d : diags) {
    std::cout << path << ":" << d.at("line").get<std::size_t>() << ": " << d.at("code").get<std::string>() << ": "
              << d.at("message").get<std::string>() << "\n";
  }
  if (!diags.empty()) return kExitFailure;
  cr_repository* r = nullptr;
  check(cr_repository_load(path.c_str(), &r), "loading " + path);
  Repo repo(r);
  std::cout << path << ": OK (" << cr_repository_size(repo.get()) << " cards)\n";
  return kExitOk;
}

struct CalibrateArgs {
  CommonOptions common;
  std::string cases;
  std::string grid;
  std::string out;
  bool strict = false;
  bool global_abstain = false;
  int parallelism = 1;
  std::size_t grid_cap = 0;
  double ceiling = -1.0;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out.flush()) {
    std::cerr << "error: cannot write " << path << "\n";
    throw Exit{kExitIo};
  }
}

int run_calibrate(const CalibrateArgs& a) {
  Repo repo = open_repo(a.common);
  Backend backend = open_backend(a.common);
  Templates templates = open_templates(a.common);
  cr_calibration_options opts = cr_default_calibration_options();
  opts.strict = a.strict ? 1 : 0;
  opts.global_abstain_set = a.global_abstain ? 1 : 0;
  opts.parallelism = a.parallelism;
  if (a.grid_cap) opts.grid_cap = a.grid_cap;
  if (a.ceiling >= 0.0) opts.false_selection_ceiling = a.ceiling;

  char* report_raw = nullptr;
  char* csv_raw = nullptr;
  check(cr_calibrate(repo.get(), backend.get(), templates.get(), a.cases.c_str(), a.grid.c_str(), &opts, &report_raw,
                     &csv_raw),
        "calibration");
  const std::string report_text = take(report_raw);
  const std::string csv = take(csv_raw);
  const json report = json::parse(report_text);

  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_text(a.out + ".csv", csv);
    write_text(a.out + ".json", report_text + "\n");
    std::cout << "wrote " << a.out << ".csv and " << a.out << ".json\n";
  }
  std::cerr << report.at("rows").size() << " rows, " << report.value("backend_calls", 0) << " backend calls\n";
  if (report.contains("best_row") && !report["best_index"].is_null()) {
    const auto& best = report["rows"].at(report["best_index"].get<std::size_t>());
    const auto& t = best.at("thresholds");
    std::cerr << "best: tau1=" << t.at("tau1") << " tau2=" << t.at("tau2") << " tau3=" << t.at("tau3")
              << " accuracy=" << best.at("selection_accuracy") << " false_selection=" << best.at("false_selection_rate")
              << "\n";
  } else {
    std::cerr << "best: none (no row under the false-selection ceiling)\n";
  }
  return kExitOk;
}

int run_replay(const CommonOptions& common, const std::string& store, const std::string& id, bool json_out) {
  Repo repo = open_repo(common);
  Backend backend = open_backend(common);
  Templates templates = open_templates(common);
  char* raw = nullptr;
  check(cr_replay(store.c_str(), id.c_str(), repo.get(), backend.get(), templates.get(), &raw), "replay of " + id);
  const json report = json::parse(take(raw));
  if (json_out) {
    std::cout << report.dump(2) << "\n";
  } else {
    const json& recorded = report.at("recorded");
    std::cout << "record:   " << id << "\n";
    std::cout << "recorded: " << (recorded.is_null() ? std::string("(route failed)") : describe(recorded)) << "\n";
    std::cout << "replayed: " << describe(report.at("replayed")) << "\n";
    std::cout << "drift:    " << (report.at("drift").get<bool>() ? "yes" : "no") << "\n";
    for (const auto& r : report.at("drift_reasons")) std::cout << "  - " << r.get<std::string>() << "\n";
  }
  return report.at("drift").get<bool>() ? kExitFailure : kExitOk;
}

int run_serve(const std::string& config) {
  // Block the signals before any thread starts so only the waiter sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  sigaddset(&signals, SIGHUP);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  cr_service* s = nullptr;
  check(cr_service_create(config.c_str(), &s), "starting service from " + config);
  Service service(s);
  int port = 0;
  check(cr_service_bind(service.get(), &port), "binding");
  std::cout << "listening on port " << port << std::endl;

  std::thread waiter([&] {
    for (;;) {
      int sig = 0;
      if (sigwait(&signals, &sig) != 0) continue;
      if (sig == SIGHUP) {
        if (cr_service_reload(service.get()) == CR_OK) {
          std::cerr << "reloaded card repository\n";
        } else {
          std::cerr << "reload failed, keeping the previous repository: " << cr_last_error() << "\n";
        }
        continue;
      }
      cr_service_stop(service.get());
      return;
    }
  });
  const cr_status status = cr_service_run(service.get());
  if (status != CR_OK) {
    // run() failed on its own; wake the waiter so it can exit.
    pthread_kill(waiter.native_handle(), SIGTERM);
  }
  waiter.join();
  check(status, "serving");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Route clinical images to model cards with calibrated abstention"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cr_version()));

  RouteArgs route;
  auto* route_cmd = app.add_subcommand("route", "Route one image or scripted case");
  add_common(route_cmd, route.common);
  route_cmd->add_option("target", route.target, "Image file, or a scripted case id");
  route_cmd->add_option("--case", route.case_id, "Case id (scripted-backend key and audit correlation id)");
  route_cmd->add_option("--tau1", route.tau1, "Stage-1 cutoff")->check(CLI::Range(0.0, 1.0));
  route_cmd->add_option("--tau2", route.tau2, "Stage-2 cutoff")->check(CLI::Range(0.0, 1.0));
  route_cmd->add_option("--tau3", route.tau3, "Stage-3 cutoff")->check(CLI::Range(0.0, 1.0));
  route_cmd->add_flag("--global-abstain", route.global_abstain, "Use {None, Normal, Other} at every stage");
  route_cmd->add_option("--top-k", route.top_k, "First-token candidates to rank")->check(CLI::Range(2, 100));
  route_cmd->add_option("--expect", route.expect, "Expected label: a card id or an abstention token");
  route_cmd->add_option("--cases", route.cases, "Labeled-case file to look the expected label up in");
  route_cmd->add_option("--audit", route.audit, "Append the decision record to this audit store");
  route_cmd->add_flag("--json", route.json_out, "Print the outcome and decision record as JSON");

  std::string validate_path;
  auto* validate_cmd = app.add_subcommand("validate-cards", "Validate a model-card file");
  validate_cmd->add_option("file", validate_path, "Card JSONL file")->required();

  CalibrateArgs cal;
  auto* cal_cmd = app.add_subcommand("calibrate", "Sweep cutoff triples over labeled cases");
  add_common(cal_cmd, cal.common);
  cal_cmd->add_option("--cases", cal.cases, "Labeled-case JSONL file")->required();
  cal_cmd->add_option("--grid", cal.grid, "Grid spec 'tau1,..;tau2,..;tau3,..'")->required();
  cal_cmd->add_option("--out", cal.out, "Write <out>.csv and <out>.json instead of CSV to stdout");
  cal_cmd->add_flag("--strict", cal.strict, "Match abstention stage and token too");
  cal_cmd->add_flag("--global-abstain", cal.global_abstain, "Use {None, Normal, Other} at every stage");
  cal_cmd->add_option("--parallelism", cal.parallelism, "Concurrent cases")->check(CLI::Range(1, 64));
  cal_cmd->add_option("--grid-cap", cal.grid_cap, "Maximum number of triples");
  cal_cmd->add_option("--ceiling", cal.ceiling, "False-selection ceiling for the best row")
      ->check(CLI::Range(0.0, 1.0));

  CommonOptions replay_common;
  std::string replay_store, replay_id;
  bool replay_json = false;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run an audited decision against the scripted backend");
  add_common(replay_cmd, replay_common);
  replay_cmd->add_option("--store", replay_store, "Audit store JSONL")->required();
  replay_cmd->add_option("--id", replay_id, "Record request_id")->required();
  replay_cmd->add_flag("--json", replay_json, "Print the replay report as JSON");

  std::string serve_config;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP routing service");
  serve_cmd->add_option("--config", serve_config, "Service config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*route_cmd) return run_route(route);
    if (*validate_cmd) return run_validate(validate_path);
    if (*cal_cmd) return run_calibrate(cal);
    if (*replay_cmd) return run_replay(replay_common, replay_store, replay_id, replay_json);
    if (*serve_cmd) return run_serve(serve_config);
  } catch (const Exit& e) {
    return e.code;
  } catch (const json::exception& e) {
    std::cerr << "error: unexpected output from the library: " << e.what() << "\n";
    return kExitError;
  }
  return kExitUsage;
}
