#ifndef SHILLFORGE_H
#define SHILLFORGE_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SfStatus {
  SF_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  SF_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  SF_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed configuration or data.
   */
  SF_STATUS_INVALID_INPUT = 3,
  SF_STATUS_IO = 4,
  /**
   * The computation itself failed.
   */
  SF_STATUS_FAILED = 5,
  /**
   * Internal panic caught at the boundary.
   */
  SF_STATUS_PANIC = 6,
} SfStatus;

/**
 * Opaque rating graph.
 */
typedef struct SfGraph SfGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful call. Valid until the next call on the same thread.
 */
const char *sf_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *sf_version(void);

/**
 * Generates a synthetic labeled rating graph.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum SfStatus sf_graph_synthesize(size_t users,
                                  size_t items,
                                  size_t fake,
                                  double density,
                                  uint64_t seed,
                                  struct SfGraph **out);

/**
 * Loads a `user_id,item_id,rating,label` CSV with ratings in `1..=levels`.
 * Pass `levels = 0` for the default of 5.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum SfStatus sf_graph_load_csv(const char *path, uint8_t levels, struct SfGraph **out);

/**
 * Writes a graph as CSV.
 *
 * # Safety
 * `graph` must come from this library and `path` be nul-terminated.
 */
enum SfStatus sf_graph_write_csv(const struct SfGraph *graph, const char *path);

/**
 * Number of users, items and ratings. Any out-pointer may be null.
 *
 * # Safety
 * `graph` must come from this library; non-null out-pointers must be writable.
 */
enum SfStatus sf_graph_counts(const struct SfGraph *graph,
                              size_t *users,
                              size_t *items,
                              size_t *edges);

/**
 * Frees a graph. Null is a no-op.
 *
 * # Safety
 * `graph` must come from this library and not be used afterwards.
 */
void sf_graph_free(struct SfGraph *graph);

/**
 * Runs every seed of an experiment described by a JSON configuration
 * (same keys as the TOML config) and returns the JSON report.
 *
 * # Safety
 * `config_json` must be nul-terminated and `report_out` writable. The
 * returned string must be freed with [`sf_string_free`].
 */
enum SfStatus sf_run_experiment(const char *config_json, char **report_out);

/**
 * Generates injection profiles for one seed of a JSON configuration and
 * returns them as `fake_user_id,item_id,rating` CSV.
 *
 * # Safety
 * `config_json` must be nul-terminated and `profiles_out` writable. The
 * returned string must be freed with [`sf_string_free`].
 */
enum SfStatus sf_attack(const char *config_json, uint64_t seed, char **profiles_out);

/**
 * Area under the ROC curve of `scores` against `is_fake` (nonzero means
 * fake), with ties counted as one half.
 *
 * # Safety
 * `scores` and `is_fake` must point to `n` readable elements; `out` writable.
 */
enum SfStatus sf_auc(const double *scores, const uint8_t *is_fake, size_t n, double *out);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHILLFORGE_H */
