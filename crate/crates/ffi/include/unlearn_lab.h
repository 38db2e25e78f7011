#ifndef UNLEARN_LAB_H
#define UNLEARN_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UlStatus {
  UL_STATUS_OK = 0,
  UL_STATUS_NULL_POINTER = 1,
  UL_STATUS_INVALID_UTF8 = 2,
  UL_STATUS_INVALID_ARGUMENT = 3,
  UL_STATUS_CONFIG = 4,
  UL_STATUS_IO = 5,
  UL_STATUS_ARTIFACT = 6,
  UL_STATUS_NUMERIC = 7,
  UL_STATUS_BUFFER_TOO_SMALL = 8,
  UL_STATUS_PANIC = 9,
} UlStatus;

// Opaque model handle.
typedef struct UlModel UlModel;

// Opaque experiment directory handle.
typedef struct UlWorkspace UlWorkspace;

// Attack rates in `[0, 1]` and ROUGE-L utility in `[0, 100]`.
typedef struct UlRecoveryReport {
  double p1_known;
  double p1_unknown;
  double p2_known;
  double p2_unknown;
  double p3_known;
  double p3_unknown;
  double u1_rouge;
} UlRecoveryReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length, 0 if none.
uintptr_t ul_last_error(char *buf, uintptr_t len);

// Loads a checkpoint written by the pipeline.
enum UlStatus ul_model_load(const char *path, struct UlModel **out);

// A freshly initialized model with the default desk shape.
enum UlStatus ul_model_init_default(uint64_t seed, struct UlModel **out);

enum UlStatus ul_model_save(const struct UlModel *model, const char *path);

void ul_model_free(struct UlModel *model);

enum UlStatus ul_model_num_layers(const struct UlModel *model, uintptr_t *out);

enum UlStatus ul_model_num_params(const struct UlModel *model, uintptr_t *out);

// Greedy completion of `prompt` (BOS is prepended). Writes the decoded
// text without the stop token into `buf`; `written` receives the byte
// length excluding the NUL. Fails with `BUFFER_TOO_SMALL` if it does not
// fit, still reporting the required length.
enum UlStatus ul_model_generate(const struct UlModel *model,
                                const char *prompt,
                                uintptr_t max_new,
                                char *buf,
                                uintptr_t len,
                                uintptr_t *written);

// `log p(answer | BOS prompt)` in nats.
enum UlStatus ul_model_logprob(const struct UlModel *model,
                               const char *prompt,
                               const char *answer,
                               double *out);

// 1 if the trimmed PII string occurs in `generated`, else 0.
enum UlStatus ul_pii_match(const char *generated, const char *pii, int32_t *out);

// ROUGE-L F1 over whitespace tokens, in `[0, 1]`.
enum UlStatus ul_rouge_l(const char *candidate, const char *reference, double *out);

// Opens the experiment directory for a TOML config (NULL for the
// default) under `root`.
enum UlStatus ul_workspace_open(const char *config_path,
                                const char *root,
                                struct UlWorkspace **out);

// Same as [`ul_workspace_open`] with the config given as TOML text.
enum UlStatus ul_workspace_open_toml(const char *toml, const char *root, struct UlWorkspace **out);

void ul_workspace_free(struct UlWorkspace *ws);

enum UlStatus ul_workspace_synth(const struct UlWorkspace *ws, uint64_t seed);

enum UlStatus ul_workspace_train(const struct UlWorkspace *ws, uint64_t seed);

enum UlStatus ul_workspace_coreset(const struct UlWorkspace *ws, uint64_t seed);

// Runs the named method; `on_coreset` nonzero unlearns the core-set.
enum UlStatus ul_workspace_unlearn(const struct UlWorkspace *ws,
                                   uint64_t seed,
                                   const char *method,
                                   int32_t on_coreset);

enum UlStatus ul_workspace_attack(const struct UlWorkspace *ws,
                                  uint64_t seed,
                                  const char *label,
                                  struct UlRecoveryReport *out);

enum UlStatus ul_workspace_analyze(const struct UlWorkspace *ws, uint64_t seed, const char *label);

enum UlStatus ul_workspace_report(const struct UlWorkspace *ws);

// Loads a model of the workspace (`target`, `retrain` or a method label).
enum UlStatus ul_workspace_model(const struct UlWorkspace *ws,
                                 uint64_t seed,
                                 const char *label,
                                 struct UlModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNLEARN_LAB_H */
