#ifndef ENCFORGE_H
#define ENCFORGE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum EfStatus {
  EF_STATUS_OK = 0,
  EF_STATUS_NULL_POINTER = 1,
  EF_STATUS_INVALID_ARGUMENT = 2,
  EF_STATUS_IO = 3,
  EF_STATUS_DATA = 4,
  EF_STATUS_NUMERIC = 5,
  EF_STATUS_BUFFER_TOO_SMALL = 6,
  EF_STATUS_PANIC = 7,
} EfStatus;

typedef struct EfBloom EfBloom;

typedef struct EfModel EfModel;

typedef struct EfVocab EfVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * caller owns the returned string.
 */
char *ef_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void ef_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ef_version(void);

/**
 * Seed derivation used for every random stream in the toolkit.
 *
 * # Safety
 * `parts` must point to `n` readable values (or be null with `n == 0`).
 */
enum EfStatus ef_derive_seed(const uint64_t *parts, size_t n, uint64_t *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a writable pointer.
 */
enum EfStatus ef_vocab_load(const char *path, struct EfVocab **out);

/**
 * Whole-word vocabulary over `words` plus the special tokens.
 *
 * # Safety
 * `words` must point to `n` NUL-terminated strings.
 */
enum EfStatus ef_vocab_synthetic(const char *const *words, size_t n, struct EfVocab **out);

/**
 * # Safety
 * `v` must be null or a handle from this library, freed once.
 */
void ef_vocab_free(struct EfVocab *v);

/**
 * # Safety
 * `v` must be a live vocabulary handle.
 */
enum EfStatus ef_vocab_len(const struct EfVocab *v, size_t *out);

/**
 * Encodes `text` into `out_ids`. `out_len` always receives the number of
 * ids produced; if it exceeds `cap` the call fails with
 * `BufferTooSmall` and nothing is written.
 *
 * # Safety
 * `out_ids` must have room for `cap` values.
 */
enum EfStatus ef_vocab_encode(const struct EfVocab *v,
                              const char *text,
                              bool add_specials,
                              uint32_t *out_ids,
                              size_t cap,
                              size_t *out_len);

/**
 * Decodes ids into a newly allocated string owned by the caller.
 *
 * # Safety
 * `ids` must point to `n` readable values.
 */
enum EfStatus ef_vocab_decode(const struct EfVocab *v, const uint32_t *ids, size_t n, char **out);

/**
 * Randomly initialised model from a named preset.
 *
 * # Safety
 * `preset` must be a NUL-terminated string.
 */
enum EfStatus ef_model_init(const char *preset, uint64_t seed, struct EfModel **out);

/**
 * Loads the weights of a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum EfStatus ef_model_load(const char *path, struct EfModel **out);

/**
 * # Safety
 * `m` must be null or a handle from this library, freed once.
 */
void ef_model_free(struct EfModel *m);

/**
 * Hidden width, maximum sequence length and parameter count.
 *
 * # Safety
 * `m` must be a live model handle; output pointers may be null.
 */
enum EfStatus ef_model_info(const struct EfModel *m,
                            size_t *hidden_size,
                            size_t *max_seq_len,
                            size_t *n_params);

/**
 * Mean-pooled embedding of one token sequence, written to `out`
 * (`hidden_size` values).
 *
 * # Safety
 * `ids` must point to `n` values and `out` have room for `cap` values.
 */
enum EfStatus ef_model_embed(const struct EfModel *m,
                             const uint32_t *ids,
                             size_t n,
                             double *out,
                             size_t cap,
                             size_t *out_len);

/**
 * Filter sized for `expected` insertions at false-positive rate `fp_rate`.
 *
 * # Safety
 * `out` must be writable.
 */
enum EfStatus ef_bloom_new(uint64_t expected, double fp_rate, uint64_t seed, struct EfBloom **out);

/**
 * # Safety
 * `b` must be null or a handle from this library, freed once.
 */
void ef_bloom_free(struct EfBloom *b);

/**
 * Inserts `len` bytes; `was_new` receives false if the item was
 * (possibly falsely) already present.
 *
 * # Safety
 * `item` must point to `len` readable bytes.
 */
enum EfStatus ef_bloom_insert(struct EfBloom *b, const uint8_t *item, size_t len, bool *was_new);

/**
 * # Safety
 * `item` must point to `len` readable bytes.
 */
enum EfStatus ef_bloom_contains(const struct EfBloom *b,
                                const uint8_t *item,
                                size_t len,
                                bool *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENCFORGE_H */
