#ifndef DOCRAG_H
#define DOCRAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum DocragStatus {
  DOCRAG_STATUS_OK = 0,
  DOCRAG_STATUS_NULL_ARGUMENT = 1,
  DOCRAG_STATUS_INVALID_UTF8 = 2,
  DOCRAG_STATUS_INVALID_ARGUMENT = 3,
  DOCRAG_STATUS_IO = 4,
  DOCRAG_STATUS_TERMINATED = 5,
  DOCRAG_STATUS_PANIC = 6,
} DocragStatus;

// A loaded page corpus.
typedef struct DocragCorpus DocragCorpus;

// Corpus, retriever and session settings shared by sessions.
typedef struct DocragEnv DocragEnv;

// One episode in progress.
typedef struct DocragSession DocragSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *docrag_last_error(void);

// # Safety
// `s` must be NULL or a string returned by this library and not yet freed.
void docrag_string_free(char *s);

// Lowercases, strips punctuation and articles, and collapses whitespace.
//
// # Safety
// `text` must be a valid C string; `out` must be writable.
enum DocragStatus docrag_normalize_answer(const char *text, char **out);

// Parses one assistant turn into JSON `{thought, action, raw, errors}`.
//
// # Safety
// `text` must be a valid C string; `out_json` must be writable.
enum DocragStatus docrag_parse_turn(const char *text, char **out_json);

// Writes `n` group-normalized advantages into `out`.
//
// # Safety
// `rewards` and `out` must each hold `n` doubles.
enum DocragStatus docrag_group_advantages(const double *rewards, size_t n, double eps, double *out);

// NDCG with binary gains of a ranked id list against a golden id set.
//
// # Safety
// `ranked` holds `n_ranked` C strings and `golden` holds `n_golden`.
enum DocragStatus docrag_ndcg(const char *const *ranked,
                              size_t n_ranked,
                              const char *const *golden,
                              size_t n_golden,
                              double *out);

// Weighted sum of five components. `weights` may be NULL for the defaults.
//
// # Safety
// `components` holds 5 doubles; `weights` is NULL or holds 5 doubles.
enum DocragStatus docrag_total_reward(const double *components, const double *weights, double *out);

// Intersection over union of two `[x1, y1, x2, y2]` boxes.
//
// # Safety
// `a` and `b` each hold 4 integers.
enum DocragStatus docrag_iou(const int64_t *a, const int64_t *b, double *out);

// Scores a trajectory given as JSON with the built-in judge. `weights` may
// be NULL for the defaults. Writes the reward breakdown as JSON.
//
// # Safety
// `trajectory_json` is a valid C string; `weights` is NULL or holds 5
// doubles; `out_json` must be writable.
enum DocragStatus docrag_score_trajectory(const char *trajectory_json,
                                          const double *weights,
                                          char **out_json);

// Loads a line-delimited corpus manifest.
//
// # Safety
// `manifest_path` is a valid C string; `out` must be writable.
enum DocragStatus docrag_corpus_load(const char *manifest_path, struct DocragCorpus **out);

// Number of pages, or 0 for NULL.
//
// # Safety
// `corpus` is NULL or a live handle.
size_t docrag_corpus_len(const struct DocragCorpus *corpus);

// # Safety
// `corpus` is NULL or a handle not yet freed. Environments built from it
// stay valid.
void docrag_corpus_free(struct DocragCorpus *corpus);

// Builds an environment over `corpus` with the hashed term-frequency
// retriever. `config_json` may be NULL for default session settings, or a
// JSON object with any of `t_max`, `k`, `zoom`, `max_prompt_chars`,
// `max_response_chars`.
//
// # Safety
// `corpus` is a live handle; `config_json` is NULL or a valid C string;
// `out` must be writable.
enum DocragStatus docrag_env_new(const struct DocragCorpus *corpus,
                                 const char *config_json,
                                 struct DocragEnv **out);

// # Safety
// `env` is NULL or a handle not yet freed.
void docrag_env_free(struct DocragEnv *env);

// Starts an episode for a query given as JSON
// `{id, text, reference_answer, golden_doc_ids, golden_boxes}`.
//
// # Safety
// `env` is a live handle; `query_json` is a valid C string; `out` must be
// writable.
enum DocragStatus docrag_session_new(const struct DocragEnv *env,
                                     const char *query_json,
                                     struct DocragSession **out);

// Applies one assistant turn and writes the step result as JSON.
// Returns `DOCRAG_STATUS_TERMINATED` once the episode has ended.
//
// # Safety
// `session` is a live handle not used concurrently; `assistant_text` is a
// valid C string; `out_json` must be writable.
enum DocragStatus docrag_session_step(struct DocragSession *session,
                                      const char *assistant_text,
                                      char **out_json);

// 1 if the episode has ended, 0 if not or for NULL.
//
// # Safety
// `session` is NULL or a live handle.
bool docrag_session_is_terminated(const struct DocragSession *session);

// Writes the trajectory so far as JSON.
//
// # Safety
// `session` is a live handle; `out_json` must be writable.
enum DocragStatus docrag_session_trajectory(const struct DocragSession *session, char **out_json);

// # Safety
// `session` is NULL or a handle not yet freed.
void docrag_session_free(struct DocragSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOCRAG_H */
