#ifndef SPIDER_H
#define SPIDER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum SpiderStatus {
  SPIDER_STATUS_OK = 0,
  SPIDER_STATUS_NULL_ARGUMENT = 1,
  SPIDER_STATUS_INVALID_ARGUMENT = 2,
  SPIDER_STATUS_INVALID_KEY = 3,
  SPIDER_STATUS_ENVELOPE_FORMAT = 4,
  SPIDER_STATUS_WRONG_RECIPIENT = 5,
  SPIDER_STATUS_AUTHENTICATION_FAILURE = 6,
  SPIDER_STATUS_CONFIG_INVALID = 7,
  SPIDER_STATUS_PIPELINE = 8,
  SPIDER_STATUS_ENTROPY = 9,
  SPIDER_STATUS_PANIC = 10,
} SpiderStatus;

/*
 Bytes owned by the library.
 */
typedef struct SpiderBuffer SpiderBuffer;

/*
 An X25519 key pair.
 */
typedef struct SpiderKeyPair SpiderKeyPair;

/*
 Message for the last failed call on this thread, or NULL. Valid until the
 next call into the library on the same thread.
 */
const char *spider_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *spider_version(void);

/*
 # Safety
 `out` must be a valid pointer to write the handle to.
 */
enum SpiderStatus spider_keypair_generate(struct SpiderKeyPair **out);

/*
 # Safety
 `secret` must point to 32 readable bytes; `out` must be writable.
 */
enum SpiderStatus spider_keypair_from_secret(const uint8_t *secret, struct SpiderKeyPair **out);

/*
 Writes the 32-byte public key.

 # Safety
 `kp` must be a live handle; `out` must point to 32 writable bytes.
 */
enum SpiderStatus spider_keypair_public_key(const struct SpiderKeyPair *kp, uint8_t *out);

/*
 Writes the 32-byte secret key.

 # Safety
 `kp` must be a live handle; `out` must point to 32 writable bytes.
 */
enum SpiderStatus spider_keypair_secret_key(const struct SpiderKeyPair *kp, uint8_t *out);

/*
 Writes the SHA-256 fingerprint of the public key (32 bytes).

 # Safety
 `kp` must be a live handle; `out` must point to 32 writable bytes.
 */
enum SpiderStatus spider_keypair_fingerprint(const struct SpiderKeyPair *kp, uint8_t *out);

/*
 # Safety
 `kp` must be NULL or a handle not yet freed.
 */
void spider_keypair_free(struct SpiderKeyPair *kp);

/*
 # Safety
 `buf` must be a live handle.
 */
const uint8_t *spider_buffer_data(const struct SpiderBuffer *buf);

/*
 # Safety
 `buf` must be a live handle.
 */
size_t spider_buffer_len(const struct SpiderBuffer *buf);

/*
 # Safety
 `buf` must be NULL or a handle not yet freed.
 */
void spider_buffer_free(struct SpiderBuffer *buf);

/*
 Seals `plaintext` to a 32-byte X25519 public key.

 # Safety
 `plaintext` must point to `len` readable bytes (may be NULL when `len` is
 0), `recipient` to 32 bytes, and `out` must be writable.
 */
enum SpiderStatus spider_seal(const uint8_t *plaintext,
                              size_t len,
                              const uint8_t *recipient,
                              struct SpiderBuffer **out);

/*
 # Safety
 `data` must point to `len` readable bytes, `kp` must be a live handle and
 `out` must be writable.
 */
enum SpiderStatus spider_open(const uint8_t *data,
                              size_t len,
                              const struct SpiderKeyPair *kp,
                              struct SpiderBuffer **out);

/*
 Hex SHA-256 of `salt || value`, written as 64 ASCII bytes.

 # Safety
 `value` must be NUL-terminated, `salt` must point to `salt_len` bytes and
 `out` must point to 64 writable bytes.
 */
enum SpiderStatus spider_pseudonym(const char *value,
                                   const uint8_t *salt,
                                   size_t salt_len,
                                   char *out);

/*
 Fills `out` with `n` Laplace(0, `scale_b`) draws from a generator seeded
 with `seed`.

 # Safety
 `out` must point to `n` writable doubles.
 */
enum SpiderStatus spider_laplace_samples(double scale_b, uint64_t seed, double *out, size_t n);

/*
 L1 sensitivity of a JSON-encoded query.

 # Safety
 `query_json` must be NUL-terminated and `out` writable.
 */
enum SpiderStatus spider_sensitivity(const char *query_json, double *out);

/*
 Runs the pipeline described by `config_json` on a sealed input. Writes
 the sealed output and the JSON run report. Hierarchy paths in the config
 resolve against the working directory.

 # Safety
 `config_json` must be NUL-terminated, `input` must point to `input_len`
 bytes, `enclave` must be a live handle and both out pointers writable.
 */
enum SpiderStatus spider_run_pipeline(const char *config_json,
                                      const uint8_t *input,
                                      size_t input_len,
                                      const struct SpiderKeyPair *enclave,
                                      struct SpiderBuffer **out_envelope,
                                      struct SpiderBuffer **out_report);

#endif  /* SPIDER_H */
