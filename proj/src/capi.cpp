// C API wrapper: translates handles and exceptions into cr_status codes.

#include "cardroute/cardroute.h"

#include "cardroute/audit_store.hpp"
#include "cardroute/calibration.hpp"
#include "cardroute/card_repository.hpp"
#include "cardroute/error.hpp"
#include "cardroute/prompt_builder.hpp"
#include "cardroute/remote_backend.hpp"
#include "cardroute/replay.hpp"
#include "cardroute/routing_pipeline.hpp"
#include "cardroute/service.hpp"

#include <json.hpp>

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

using namespace cardroute;
using nlohmann::json;

struct cr_repository {
  CardRepository repo;
};

struct cr_backend {
  std::unique_ptr<VlmBackend> backend;
};

struct cr_templates {
  PromptBuilder builder;
};

struct cr_audit_store {
  std::unique_ptr<AuditStore> store;
};

struct cr_service {
  std::unique_ptr<RoutingService> service;
};

namespace {

thread_local std::string g_last_error;

cr_status set_error(cr_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

cr_status ok() {
  g_last_error.clear();
  return CR_OK;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Runs fn, mapping exceptions onto status codes.
template <typename Fn>
cr_status guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    return set_error(static_cast<cr_status>(e.code()), e.what());
  } catch (const json::exception& e) {
    return set_error(CR_ERR_INVALID_ARGUMENT, std::string("JSON: ") + e.what());
  } catch (const std::bad_alloc&) {
    return set_error(CR_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(CR_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(CR_ERR_INTERNAL, "unknown error");
  }
}

const PromptBuilder& builder_of(const cr_templates* t) {
  static const PromptBuilder kBuiltin;
  return t ? t->builder : kBuiltin;
}

}  // namespace

extern "C" {

const char* cr_version(void) { return "1.0.0"; }

const char* cr_status_name(cr_status status) { return error_code_name(static_cast<ErrorCode>(status)); }

const char* cr_last_error(void) { return g_last_error.c_str(); }

void cr_string_free(char* s) { std::free(s); }

cr_thresholds cr_default_thresholds(void) { return {kDefaultTau1, kDefaultTau2, kDefaultTau3}; }

cr_status cr_default_config_json(char** out_json) {
  if (!out_json) return set_error(CR_ERR_INVALID_ARGUMENT, "out_json is NULL");
  return guarded([&] {
    const AbstainSets sets;
    json abstain;
    for (int stage = 1; stage <= 3; ++stage) {
      json arr = json::array();
      for (auto t : sets.for_stage(stage)) arr.push_back(abstain_token_text(t));
      abstain["stage" + std::to_string(stage)] = arr;
    }
    const json config = {{"thresholds", Thresholds{}.to_json()},
                         {"abstain_sets", abstain},
                         {"top_k", kDefaultTopK},
                         {"max_answer_tokens", kDefaultMaxAnswerTokens}};
    *out_json = dup_string(config.dump());
    return ok();
  });
}

cr_route_params cr_default_route_params(void) {
  cr_route_params p{};
  p.thresholds = cr_default_thresholds();
  return p;
}

cr_calibration_options cr_default_calibration_options(void) {
  cr_calibration_options o{};
  o.parallelism = 1;
  o.grid_cap = kDefaultGridCap;
  o.false_selection_ceiling = kDefaultFalseSelectionCeiling;
  return o;
}

cr_status cr_repository_load(const char* path, cr_repository** out) {
  if (!path || !out) return set_error(CR_ERR_INVALID_ARGUMENT, "path and out must be non-NULL");
  return guarded([&] {
    *out = new cr_repository{CardRepository::load(path)};
    return ok();
  });
}

void cr_repository_free(cr_repository* repo) { delete repo; }

size_t cr_repository_size(const cr_repository* repo) { return repo ? repo->repo.size() : 0; }

cr_status cr_repository_digest(const cr_repository* repo, char** out) {
  if (!repo || !out) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    *out = dup_string(repo->repo.source_digest());
    return ok();
  });
}

cr_status cr_repository_serialize(const cr_repository* repo, char** out_jsonl) {
  if (!repo || !out_jsonl) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    *out_jsonl = dup_string(repo->repo.serialize());
    return ok();
  });
}

cr_status cr_repository_cards_json(const cr_repository* repo, char** out_json) {
  if (!repo || !out_json) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    json arr = json::array();
    for (const auto& c : repo->repo.cards()) {
      arr.push_back({{"id", c.id}, {"task_caption", c.task_caption}, {"modality", c.modality}});
    }
    *out_json = dup_string(arr.dump());
    return ok();
  });
}

cr_status cr_validate_cards(const char* path, char** out_json) {
  if (!path || !out_json) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    json arr = json::array();
    for (const auto& d : validate_card_file(path)) {
      arr.push_back({{"line", d.line}, {"code", d.code}, {"message", d.message}});
    }
    *out_json = dup_string(arr.dump());
    return ok();
  });
}

cr_status cr_templates_load(const char* dir, cr_templates** out) {
  if (!out) return set_error(CR_ERR_INVALID_ARGUMENT, "out is NULL");
  return guarded([&] {
    *out = dir ? new cr_templates{PromptBuilder(PromptTemplates::load_dir(dir))} : new cr_templates{PromptBuilder()};
    return ok();
  });
}

void cr_templates_free(cr_templates* templates) { delete templates; }

cr_status cr_templates_version(const cr_templates* templates, char** out) {
  if (!out) return set_error(CR_ERR_INVALID_ARGUMENT, "out is NULL");
  return guarded([&] {
    *out = dup_string(builder_of(templates).template_version());
    return ok();
  });
}

cr_status cr_backend_open_scripted(const char* script_path, cr_backend** out) {
  if (!script_path || !out) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    *out = new cr_backend{ScriptedBackend::load(script_path)};
    return ok();
  });
}

cr_status cr_backend_open_remote(const char* config_json, cr_backend** out) {
  if (!config_json || !out) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    *out = new cr_backend{std::make_unique<RemoteBackend>(RemoteBackendConfig::from_json(json::parse(config_json)))};
    return ok();
  });
}

void cr_backend_free(cr_backend* backend) { delete backend; }

cr_status cr_backend_identifier(const cr_backend* backend, char** out) {
  if (!backend || !out) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    *out = dup_string(backend->backend->identifier());
    return ok();
  });
}

cr_status cr_route(const cr_repository* repo, cr_backend* backend, const cr_templates* templates,
                   const cr_route_params* params, char** out_json) {
  if (!repo || !backend || !params || !out_json) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  if (params->image_len > 0 && !params->image) return set_error(CR_ERR_INVALID_ARGUMENT, "image is NULL");
  *out_json = nullptr;
  return guarded([&] {
    PipelineOptions options;
    if (params->global_abstain_set) options.abstain_sets = AbstainSets::global();
    if (params->top_k) options.top_k = params->top_k;
    RouteRequest req;
    req.case_id = params->case_id ? params->case_id : "";
    req.thresholds = {params->thresholds.tau1, params->thresholds.tau2, params->thresholds.tau3};
    if (params->image) req.image = std::make_shared<const ImageBytes>(params->image, params->image + params->image_len);
    try {
      RoutingPipeline pipeline(repo->repo, *backend->backend, builder_of(templates), options);
      RouteResult result = pipeline.route(req);
      *out_json = dup_string(json{{"outcome", result.outcome.to_json()}, {"decision_record", result.record.to_json()}}.dump());
      return ok();
    } catch (const RouteFailure& f) {
      json body = {{"error", {{"code", error_code_name(f.code())}, {"message", f.what()}}},
                   {"decision_record", f.partial_record().to_json()}};
      *out_json = dup_string(body.dump());
      return set_error(static_cast<cr_status>(f.code()), f.what());
    }
  });
}

cr_status cr_audit_store_open(const char* path, cr_audit_store** out) {
  if (!path || !out) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    *out = new cr_audit_store{std::make_unique<AuditStore>(path)};
    return ok();
  });
}

void cr_audit_store_free(cr_audit_store* store) { delete store; }

cr_status cr_audit_store_append(cr_audit_store* store, const char* record_json) {
  if (!store || !record_json) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    json j = json::parse(record_json);
    const json& rec = j.contains("decision_record") ? j["decision_record"] : j;
    store->store->append(DecisionRecord::from_json(rec));
    return ok();
  });
}

cr_status cr_audit_store_get(const cr_audit_store* store, const char* record_id, char** out_json) {
  if (!store || !record_id || !out_json) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    auto r = store->store->find(record_id);
    if (!r) return set_error(CR_ERR_RECORD_NOT_FOUND, std::string("no record with id ") + record_id);
    *out_json = dup_string(r->to_json().dump());
    return ok();
  });
}

cr_status cr_replay(const char* store_path, const char* record_id, const cr_repository* repo, cr_backend* backend,
                    const cr_templates* templates, char** out_json) {
  if (!store_path || !record_id || !repo || !backend || !out_json) {
    return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  }
  auto* scripted = dynamic_cast<ScriptedBackend*>(backend->backend.get());
  if (!scripted) return set_error(CR_ERR_INVALID_ARGUMENT, "replay requires a scripted backend");
  return guarded([&] {
    const auto records = read_audit_file(store_path);
    ReplayReport report = replay(records, record_id, repo->repo, *scripted, builder_of(templates));
    *out_json = dup_string(report.to_json().dump());
    return ok();
  });
}

cr_status cr_calibrate(const cr_repository* repo, cr_backend* backend, const cr_templates* templates,
                       const char* cases_path, const char* grid_spec, const cr_calibration_options* options,
                       char** out_report_json, char** out_csv) {
  if (!repo || !backend || !cases_path || !grid_spec) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    const cr_calibration_options opts = options ? *options : cr_default_calibration_options();
    SweepOptions sweep_opts;
    sweep_opts.evaluation.strict = opts.strict != 0;
    sweep_opts.evaluation.parallelism = opts.parallelism;
    if (opts.global_abstain_set) sweep_opts.evaluation.pipeline.abstain_sets = AbstainSets::global();
    sweep_opts.grid_cap = opts.grid_cap;
    sweep_opts.false_selection_ceiling = opts.false_selection_ceiling;
    const auto cases = load_cases(cases_path, &repo->repo);
    const CalibrationReport report =
        sweep(cases, parse_grid_spec(grid_spec), repo->repo, *backend->backend, builder_of(templates), sweep_opts);
    if (out_report_json) *out_report_json = dup_string(report.to_json().dump(2));
    if (out_csv) *out_csv = dup_string(report.to_csv());
    return ok();
  });
}

cr_status cr_service_create(const char* config_path, cr_service** out) {
  if (!config_path || !out) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    *out = new cr_service{std::make_unique<RoutingService>(ServiceConfig::load(config_path))};
    return ok();
  });
}

cr_status cr_service_bind(cr_service* service, int* out_port) {
  if (!service) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    const int port = service->service->bind();
    if (out_port) *out_port = port;
    return ok();
  });
}

cr_status cr_service_run(cr_service* service) {
  if (!service) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    service->service->run();
    return ok();
  });
}

void cr_service_stop(cr_service* service) {
  if (service) service->service->stop();
}

cr_status cr_service_reload(cr_service* service) {
  if (!service) return set_error(CR_ERR_INVALID_ARGUMENT, "NULL argument");
  return guarded([&] {
    service->service->reload_repository();
    return ok();
  });
}

void cr_service_free(cr_service* service) { delete service; }

}  // extern "C"
