#ifndef DTOT_H
#define DTOT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DtotStatus {
  DTOT_STATUS_OK = 0,
  DTOT_STATUS_NULL_ARGUMENT = 1,
  DTOT_STATUS_INVALID_UTF8 = 2,
  DTOT_STATUS_INVALID_ARGUMENT = 3,
  /**
   * A tree, scenario or trace could not be loaded.
   */
  DTOT_STATUS_LOAD = 4,
  /**
   * The backend failed or had no reply for a request.
   */
  DTOT_STATUS_BACKEND = 5,
  DTOT_STATUS_INSUFFICIENT_DATA = 6,
  DTOT_STATUS_PANIC = 7,
} DtotStatus;

typedef enum DtotKind {
  DTOT_KIND_BLACK_BOX = 0,
  DTOT_KIND_WHITE_BOX = 1,
} DtotKind;

typedef enum DtotAnswer {
  DTOT_ANSWER_NO = 0,
  DTOT_ANSWER_YES = 1,
  DTOT_ANSWER_UNPARSED = -1,
} DtotAnswer;

/**
 * Opaque detector over a scripted backend.
 */
typedef struct DtotDetector DtotDetector;

/**
 * Opaque context tree.
 */
typedef struct DtotTree DtotTree;

/**
 * Detection settings. Start from [`dtot_options_default`].
 */
typedef struct DtotOptions {
  uint8_t s_low;
  uint8_t s_high;
  double s_delta;
  size_t max_steps;
  bool return_best;
} DtotOptions;

/**
 * Summary of one detection. `rating` is -1 when the reply carried none.
 */
typedef struct DtotDetection {
  enum DtotAnswer answer;
  double confidence;
  bool confident;
  int32_t rating;
  size_t steps;
  size_t returned_step;
} DtotDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *dtot_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void dtot_string_free(char *s);

struct DtotOptions dtot_options_default(void);

/**
 * The built-in toxic tree with five sub-categories.
 */
struct DtotTree *dtot_tree_default(void);

/**
 * Parses a tree from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a writable pointer.
 */
enum DtotStatus dtot_tree_from_json(const char *json, struct DtotTree **out);

/**
 * # Safety
 * `tree` must be null or a handle from this library, freed once.
 */
void dtot_tree_free(struct DtotTree *tree);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `tree` must be null or a live handle.
 */
size_t dtot_tree_node_count(const struct DtotTree *tree);

/**
 * Depth counted in levels, or 0 for a null handle.
 *
 * # Safety
 * `tree` must be null or a live handle.
 */
size_t dtot_tree_depth(const struct DtotTree *tree);

/**
 * Builds a detector that replays `scenario_json`. The tree is copied, so
 * the caller keeps ownership of `tree`.
 *
 * # Safety
 * Pointers must be valid; `options` may be null for defaults.
 */
enum DtotStatus dtot_detector_new_scripted(const struct DtotTree *tree,
                                           enum DtotKind kind,
                                           const char *scenario_json,
                                           const struct DtotOptions *options,
                                           struct DtotDetector **out);

/**
 * # Safety
 * `detector` must be null or a handle from this library, freed once.
 */
void dtot_detector_free(struct DtotDetector *detector);

/**
 * Runs detection on one statement. When `trace_json` is non-null it
 * receives the step trace as JSON lines, to be freed with
 * [`dtot_string_free`].
 *
 * # Safety
 * Pointers must be valid; `trace_json` may be null.
 */
enum DtotStatus dtot_detect(const struct DtotDetector *detector,
                            const char *id,
                            const char *text,
                            struct DtotDetection *out,
                            char **trace_json);

/**
 * Parses a model reply. `rating` gets -1 when absent; `rationale` may be
 * null, otherwise it receives a string to free with [`dtot_string_free`].
 *
 * # Safety
 * Pointers must be valid; `rationale` may be null.
 */
enum DtotStatus dtot_parse_response(const char *text,
                                    enum DtotKind kind,
                                    enum DtotAnswer *answer,
                                    int32_t *rating,
                                    char **rationale);

/**
 * Black-box confidence of a self-reported rating: 1 outside the open
 * interval `(s_low, s_high)`, 0 inside.
 */
enum DtotStatus dtot_black_box_confidence(uint8_t rating,
                                          uint8_t s_low,
                                          uint8_t s_high,
                                          double *out);

/**
 * Probability of `answer` normalized over the Yes/No verbalizers. An
 * unparsed answer scores 0.
 */
double dtot_white_box_confidence(double logprob_yes, double logprob_no, enum DtotAnswer answer);

/**
 * ROC-AUC of `scores` against 0/1 `labels`, ties sharing average rank.
 * Fails with [`DtotStatus::InsufficientData`] unless both classes occur.
 *
 * # Safety
 * `scores` and `labels` must each point to `n` readable elements.
 */
enum DtotStatus dtot_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DTOT_H */
