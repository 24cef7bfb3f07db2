/*
 * cardroute C API.
 *
 * Opaque handles own their C++ objects; free each with its *_free function.
 * Every call returns a cr_status. On failure, cr_last_error() returns a
 * message for the calling thread, valid until that thread's next API call.
 * Strings returned through char** are heap-allocated; release them with
 * cr_string_free().
 */
#ifndef CARDROUTE_CARDROUTE_H_
#define CARDROUTE_CARDROUTE_H_

#include <stddef.h>

#if defined(_WIN32)
#  if defined(CARDROUTE_BUILDING)
#    define CR_API __declspec(dllexport)
#  else
#    define CR_API __declspec(dllimport)
#  endif
#else
#  define CR_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cr_status {
  CR_OK = 0,
  CR_ERR_INVALID_ARGUMENT = 1,
  CR_ERR_FILE_MISSING = 2,
  CR_ERR_IO = 3,
  CR_ERR_MALFORMED_RECORD = 4,
  CR_ERR_DUPLICATE_ID = 5,
  CR_ERR_RESERVED_MODALITY = 6,
  CR_ERR_INSUFFICIENT_CANDIDATES = 7,
  CR_ERR_EMPTY_MODALITY_LIST = 8,
  CR_ERR_NO_CANDIDATES = 9,
  CR_ERR_INVALID_THRESHOLDS = 10,
  CR_ERR_BACKEND_UNREACHABLE = 11,
  CR_ERR_PROTOCOL = 12,
  CR_ERR_LOGPROBS_UNSUPPORTED = 13,
  CR_ERR_UNKNOWN_FIRST_TOKEN = 14,
  CR_ERR_MALFORMED_SCRIPT = 15,
  CR_ERR_FIXTURE_MISSING = 16,
  CR_ERR_GRID_TOO_LARGE = 17,
  CR_ERR_RECORD_NOT_FOUND = 18,
  CR_ERR_REPO_DIGEST_MISMATCH = 19,
  CR_ERR_TEMPLATE = 20,
  CR_ERR_DUPLICATE_RECORD = 21,
  CR_ERR_INTERNAL = 99
} cr_status;

typedef struct cr_repository cr_repository;
typedef struct cr_backend cr_backend;
typedef struct cr_templates cr_templates;
typedef struct cr_audit_store cr_audit_store;
typedef struct cr_service cr_service;

typedef struct cr_thresholds {
  double tau1;
  double tau2;
  double tau3;
} cr_thresholds;

typedef struct cr_route_params {
  const char* case_id;        /* scripted-backend key and audit correlation id */
  const unsigned char* image; /* may be NULL */
  size_t image_len;
  cr_thresholds thresholds;
  int global_abstain_set;     /* nonzero: {None, Normal, Other} at every stage */
  size_t top_k;               /* 0 selects the default (5) */
} cr_route_params;

typedef struct cr_calibration_options {
  int strict;                     /* compare abstention stage/token too */
  int global_abstain_set;
  int parallelism;                /* concurrent cases, >= 1 */
  size_t grid_cap;                /* maximum number of threshold triples */
  double false_selection_ceiling; /* best-row constraint */
} cr_calibration_options;

CR_API const char* cr_version(void);
CR_API const char* cr_status_name(cr_status status);
CR_API const char* cr_last_error(void);
CR_API void cr_string_free(char* s);

CR_API cr_thresholds cr_default_thresholds(void);
/* Default route configuration as JSON: thresholds, abstain sets, top_k. */
CR_API cr_status cr_default_config_json(char** out_json);
CR_API cr_route_params cr_default_route_params(void);
CR_API cr_calibration_options cr_default_calibration_options(void);

/* --- card repository --- */
CR_API cr_status cr_repository_load(const char* path, cr_repository** out);
CR_API void cr_repository_free(cr_repository* repo);
CR_API size_t cr_repository_size(const cr_repository* repo);
CR_API cr_status cr_repository_digest(const cr_repository* repo, char** out);
CR_API cr_status cr_repository_serialize(const cr_repository* repo, char** out_jsonl);
/* [{"id","task_caption","modality"}, ...] */
CR_API cr_status cr_repository_cards_json(const cr_repository* repo, char** out_json);
/* Diagnostics as [{"line","code","message"}, ...]; an empty array means valid.
   Returns CR_OK whenever the file could be read. */
CR_API cr_status cr_validate_cards(const char* path, char** out_json);

/* --- prompt templates --- */
/* dir == NULL selects the builtin templates. */
CR_API cr_status cr_templates_load(const char* dir, cr_templates** out);
CR_API void cr_templates_free(cr_templates* templates);
CR_API cr_status cr_templates_version(const cr_templates* templates, char** out);

/* --- backends --- */
CR_API cr_status cr_backend_open_scripted(const char* script_path, cr_backend** out);
/* {"base_url","model","max_in_flight","timeout_s","max_retries","initial_backoff_ms"} */
CR_API cr_status cr_backend_open_remote(const char* config_json, cr_backend** out);
CR_API void cr_backend_free(cr_backend* backend);
CR_API cr_status cr_backend_identifier(const cr_backend* backend, char** out);

/* --- routing --- */
/* templates may be NULL (builtin). On success *out_json is
   {"outcome": {...}, "decision_record": {...}}. When routing fails after it
   started, the status is the failure and *out_json is
   {"error": {...}, "decision_record": {partial}}. */
CR_API cr_status cr_route(const cr_repository* repo, cr_backend* backend, const cr_templates* templates,
                          const cr_route_params* params, char** out_json);

/* --- audit store --- */
CR_API cr_status cr_audit_store_open(const char* path, cr_audit_store** out);
CR_API void cr_audit_store_free(cr_audit_store* store);
/* Appends the "decision_record" of a cr_route result, or a bare record. */
CR_API cr_status cr_audit_store_append(cr_audit_store* store, const char* record_json);
CR_API cr_status cr_audit_store_get(const cr_audit_store* store, const char* record_id, char** out_json);

/* Replays a stored record; the backend must be scripted. *out_json holds
   {"record_id","recorded","replayed","drift","drift_reasons","replay_record"}. */
CR_API cr_status cr_replay(const char* store_path, const char* record_id, const cr_repository* repo,
                           cr_backend* backend, const cr_templates* templates, char** out_json);

/* --- calibration --- */
/* grid_spec: "tau1 values;tau2 values;tau3 values", comma-separated.
   Either output pointer may be NULL. */
CR_API cr_status cr_calibrate(const cr_repository* repo, cr_backend* backend, const cr_templates* templates,
                              const char* cases_path, const char* grid_spec, const cr_calibration_options* options,
                              char** out_report_json, char** out_csv);

/* --- HTTP service --- */
CR_API cr_status cr_service_create(const char* config_path, cr_service** out);
CR_API cr_status cr_service_bind(cr_service* service, int* out_port);
/* Blocks until cr_service_stop() is called from another thread. */
CR_API cr_status cr_service_run(cr_service* service);
CR_API void cr_service_stop(cr_service* service);
CR_API cr_status cr_service_reload(cr_service* service);
CR_API void cr_service_free(cr_service* service);

#ifdef __cplusplus
}  /* extern "C" */
#endif

#endif  /* CARDROUTE_CARDROUTE_H_ */
