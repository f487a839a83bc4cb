#ifndef GW_H
#define GW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Dimension of the default hashing embedder.
 */
#define GW_DEFAULT_DIMENSION 256

/**
 * Seed of the default hashing embedder.
 */
#define GW_DEFAULT_SEED 7455477621785257316

typedef enum GwStatus {
  GW_STATUS_OK = 0,
  GW_STATUS_INVALID_ARGUMENT = 1,
  GW_STATUS_NOT_FOUND = 2,
  GW_STATUS_NOT_INDEXED = 3,
  GW_STATUS_EMPTY_QUERY = 4,
  GW_STATUS_PROVIDER = 5,
  GW_STATUS_BUSY = 6,
  GW_STATUS_IO = 7,
  GW_STATUS_INTERNAL = 8,
} GwStatus;

/**
 * Opaque engine handle.
 */
typedef struct GwEngine GwEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Opens an engine. `config_toml` is the text of a TOML configuration and
 * may be null for defaults. On success `*out` receives the handle.
 *
 * # Safety
 * `config_toml` must be null or a NUL-terminated string; `out` must be a
 * valid pointer.
 */
enum GwStatus gw_engine_open(const char *config_toml, struct GwEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` must be null or a handle from `gw_engine_open` not yet freed.
 */
void gw_engine_free(struct GwEngine *engine);

/**
 * Ingests a collection. `request_json` is `{"manifest": {...}, "bodies":
 * {"doc_id": "text", ...}}`; `*out_json` receives the ingest report.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum GwStatus gw_ingest(const struct GwEngine *engine, const char *request_json, char **out_json);

/**
 * Builds the index for a collection; `*out_json` receives the report.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum GwStatus gw_index(const struct GwEngine *engine, const char *collection_id, char **out_json);

/**
 * Starts a session; `*out_session_id` receives its id.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum GwStatus gw_session_create(const struct GwEngine *engine,
                                const char *collection_id,
                                char **out_session_id);

/**
 * Asks a question within a session; `*out_json` receives the answer with
 * citations and probes.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum GwStatus gw_ask(const struct GwEngine *engine,
                     const char *session_id,
                     const char *query,
                     char **out_json);

/**
 * `*out_json` receives the session with its turns.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum GwStatus gw_session_history(const struct GwEngine *engine,
                                 const char *session_id,
                                 char **out_json);

/**
 * Writes the unit-norm hashing embedding of `text` into `out[0..dimension]`.
 * Returns `GW_STATUS_EMPTY_QUERY` when the text has no indexable tokens.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must hold `dimension` doubles.
 */
enum GwStatus gw_hashing_embed(const char *text, size_t dimension, uint64_t seed, double *out);

/**
 * Cosine similarity of two unit vectors of length `len`, clamped to
 * [-1, 1].
 *
 * # Safety
 * `a` and `b` must hold `len` doubles; `out` must be valid.
 */
enum GwStatus gw_cosine(const double *a, const double *b, size_t len, double *out);

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next gw call on the same thread.
 */
const char *gw_last_error_message(void);

/**
 * Frees a string returned through an `out` parameter. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void gw_string_free(char *s);

/**
 * Library version, static storage.
 */
const char *gw_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GW_H */
