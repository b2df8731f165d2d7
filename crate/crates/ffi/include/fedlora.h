#ifndef FEDLORA_H
#define FEDLORA_H

#include <stddef.h>
#include <stdint.h>

typedef enum FedloraStatus {
  FEDLORA_STATUS_OK = 0,
  FEDLORA_STATUS_NULL_POINTER = 1,
  FEDLORA_STATUS_INVALID_STRING = 2,
  FEDLORA_STATUS_CONFIG = 3,
  FEDLORA_STATUS_DATA = 4,
  FEDLORA_STATUS_RUNTIME = 5,
  FEDLORA_STATUS_OUT_OF_RANGE = 6,
  FEDLORA_STATUS_PANIC = 7,
} FedloraStatus;

/*
 Validated experiment configuration.
 */
typedef struct FedloraConfig FedloraConfig;

/*
 Result of a finished experiment.
 */
typedef struct FedloraReport FedloraReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on this thread.
 */
const char *fedlora_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *fedlora_version(void);

/*
 Parses and validates a JSON configuration document.

 # Safety
 `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FedloraStatus fedlora_config_from_json(const char *json, struct FedloraConfig **out);

/*
 Applies one `key.path=value` override; the config is unchanged on failure.

 # Safety
 `config` must come from [`fedlora_config_from_json`]; `assignment` must be NUL-terminated.
 */
enum FedloraStatus fedlora_config_set(struct FedloraConfig *config, const char *assignment);

/*
 Fully defaulted configuration as a JSON string; free with [`fedlora_string_free`].

 # Safety
 `config` must be a live handle and `out` writable.
 */
enum FedloraStatus fedlora_config_to_json(const struct FedloraConfig *config, char **out);

/*
 # Safety
 `config` must be null or a handle not yet freed.
 */
void fedlora_config_free(struct FedloraConfig *config);

/*
 Runs the experiment described by `config`; writes nothing to disk.

 # Safety
 `config` must be a live handle and `out` writable.
 */
enum FedloraStatus fedlora_run(const struct FedloraConfig *config, struct FedloraReport **out);

/*
 Mean of the per-client final test accuracies.

 # Safety
 `report` must be a live handle and `out` writable.
 */
enum FedloraStatus fedlora_report_mean_accuracy(const struct FedloraReport *report, double *out);

/*
 # Safety
 `report` must be a live handle and `out` writable.
 */
enum FedloraStatus fedlora_report_client_count(const struct FedloraReport *report, size_t *out);

/*
 Final test accuracy of client `index`.

 # Safety
 `report` must be a live handle and `out` writable.
 */
enum FedloraStatus fedlora_report_client_accuracy(const struct FedloraReport *report,
                                                  size_t index,
                                                  double *out);

/*
 The `report.json` document; free with [`fedlora_string_free`].

 # Safety
 `report` must be a live handle and `out` writable.
 */
enum FedloraStatus fedlora_report_to_json(const struct FedloraReport *report, char **out);

/*
 Writes the report files into `dir`, creating it if needed.

 # Safety
 `report` must be a live handle; `dir` must be NUL-terminated.
 */
enum FedloraStatus fedlora_report_write(const struct FedloraReport *report, const char *dir);

/*
 # Safety
 `report` must be null or a handle not yet freed.
 */
void fedlora_report_free(struct FedloraReport *report);

/*
 # Safety
 `s` must be null or a string returned by this library and not yet freed.
 */
void fedlora_string_free(char *s);

/*
 Similarity weights from an `n × n` row-major distance matrix; `out`
 receives `n × n` row-major weights.

 # Safety
 `distances` must point to `n·n` readable doubles and `out` to `n·n` writable ones.
 */
enum FedloraStatus fedlora_similarity_weights(const double *distances,
                                              size_t n,
                                              double lambda,
                                              double epsilon,
                                              double *out);

/*
 Frobenius distance between two row-major `rows × cols` matrices.

 # Safety
 `a` and `b` must each point to `rows·cols` readable doubles; `out` must be writable.
 */
enum FedloraStatus fedlora_frob_distance(const double *a,
                                         const double *b,
                                         size_t rows,
                                         size_t cols,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDLORA_H */
