#ifndef COEVO_H
#define COEVO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CoevoStatus {
  COEVO_STATUS_OK = 0,
  COEVO_STATUS_NULL_POINTER = 1,
  COEVO_STATUS_INVALID_ARGUMENT = 2,
  COEVO_STATUS_INVALID_JSON = 3,
  COEVO_STATUS_INVALID_MORPHOLOGY = 4,
  COEVO_STATUS_INVALID_PARAMS = 5,
  COEVO_STATUS_SIMULATION = 6,
  COEVO_STATUS_TERMINATED = 7,
  COEVO_STATUS_BUFFER_TOO_SMALL = 8,
  COEVO_STATUS_PANIC = 9,
} CoevoStatus;

typedef enum CoevoEnvKind {
  COEVO_ENV_KIND_ROUGH_TERRAIN = 0,
  COEVO_ENV_KIND_GAP_CROSSER = 1,
} CoevoEnvKind;

typedef struct CoevoMorphology CoevoMorphology;

typedef struct CoevoWorld CoevoWorld;

/**
 * Environment parameters; fields unused by `kind` are ignored.
 */
typedef struct CoevoEnvParams {
  enum CoevoEnvKind kind;
  double max_height;
  double height_variance;
  double gap_width;
} CoevoEnvParams;

/**
 * Result of one control step.
 */
typedef struct CoevoStep {
  double reward;
  double speed;
  bool done;
} CoevoStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf`; see
 * `coevo_morphology_to_json` for the buffer protocol.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes or null; `len` must be valid or null.
 */
enum CoevoStatus coevo_last_error(char *buf, size_t cap, size_t *len);

/**
 * Default starting design: a head with `num_lv1` single-bone limbs.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CoevoStatus coevo_morphology_initial(size_t num_lv1, struct CoevoMorphology **out);

/**
 * Parses a morphology document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum CoevoStatus coevo_morphology_from_json(const char *json, struct CoevoMorphology **out);

/**
 * Serializes a morphology. Call with a null `buf` to learn the size.
 *
 * # Safety
 * `m` must come from this library; `buf` valid for `cap` bytes or null.
 */
enum CoevoStatus coevo_morphology_to_json(const struct CoevoMorphology *m,
                                          char *buf,
                                          size_t cap,
                                          size_t *len);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `m` must come from this library or be null.
 */
size_t coevo_morphology_node_count(const struct CoevoMorphology *m);

/**
 * # Safety
 * `m` must come from this library or be null, and not be used afterwards.
 */
void coevo_morphology_free(struct CoevoMorphology *m);

/**
 * Builds a world for `m` on terrain generated from `params` and `seed`,
 * using the default simulator settings.
 *
 * # Safety
 * `m` and `params` must be valid; `out` must be a valid pointer.
 */
enum CoevoStatus coevo_world_new(const struct CoevoMorphology *m,
                                 const struct CoevoEnvParams *params,
                                 uint64_t seed,
                                 struct CoevoWorld **out);

/**
 * Entries expected by `coevo_world_step`: one per morphology node.
 *
 * # Safety
 * `w` must come from this library or be null.
 */
size_t coevo_world_joint_count(const struct CoevoWorld *w);

/**
 * Advances one control step with `n` normalized torques.
 *
 * # Safety
 * `w` must be valid; `torques` valid for `n` reads; `out` valid or null.
 */
enum CoevoStatus coevo_world_step(struct CoevoWorld *w,
                                  const double *torques,
                                  size_t n,
                                  struct CoevoStep *out);

/**
 * Writes the observation, six values per node, into `buf`; `len` receives
 * the number of values.
 *
 * # Safety
 * `w` must be valid; `buf` valid for `cap` writes or null; `len` valid or null.
 */
enum CoevoStatus coevo_world_observe(const struct CoevoWorld *w,
                                     double *buf,
                                     size_t cap,
                                     size_t *len);

/**
 * Root (head) position.
 *
 * # Safety
 * `w` must be valid; `x` and `z` valid or null.
 */
enum CoevoStatus coevo_world_root(const struct CoevoWorld *w, double *x, double *z);

/**
 * # Safety
 * `w` must come from this library or be null, and not be used afterwards.
 */
void coevo_world_free(struct CoevoWorld *w);

/**
 * Roughness of the terrain generated from `params` and `seed`.
 *
 * # Safety
 * `params` and `out` must be valid.
 */
enum CoevoStatus coevo_terrain_roughness(const struct CoevoEnvParams *params,
                                         uint64_t seed,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COEVO_H */
