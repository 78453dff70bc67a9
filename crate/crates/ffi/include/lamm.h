#ifndef LAMM_H
#define LAMM_H

#include <stddef.h>
#include <stdint.h>

// Status codes returned by every fallible function.
typedef enum LammStatus {
  LAMM_STATUS_OK = 0,
  LAMM_STATUS_NULL_POINTER = 1,
  LAMM_STATUS_IO = 2,
  LAMM_STATUS_CHECKPOINT = 3,
  LAMM_STATUS_TEMPLATE_MISMATCH = 4,
  LAMM_STATUS_SHAPE_MISMATCH = 5,
  LAMM_STATUS_INVALID_ARGUMENT = 6,
  LAMM_STATUS_PANIC = 7,
} LammStatus;

// Opaque model handle.
typedef struct LammModel LammModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *lamm_last_error(void);

// Load a checkpoint. On success `*out` owns a handle to release with
// [`lamm_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum LammStatus lamm_model_load(const char *path, struct LammModel **out);

// # Safety
// `model` must be null or a handle from [`lamm_model_load`] not yet freed.
void lamm_model_free(struct LammModel *model);

// Template vertex count, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t lamm_model_num_vertices(const struct LammModel *model);

// # Safety
// `model` must be null or a live handle.
size_t lamm_model_latent_size(const struct LammModel *model);

// # Safety
// `model` must be null or a live handle.
size_t lamm_model_num_regions(const struct LammModel *model);

// Control points of all regions, region by region.
//
// # Safety
// `model` must be null or a live handle.
size_t lamm_model_num_controls(const struct LammModel *model);

// Write the control vertex indices (region by region) into `out`.
//
// # Safety
// `model` must be a live handle and `out` valid for `len` writes.
enum LammStatus lamm_model_control_indices(const struct LammModel *model,
                                           uint32_t *out,
                                           size_t len);

// Encode one mesh given as `3N` vertex coordinates into `latent_size` floats.
//
// # Safety
// Pointers must be valid for the given lengths.
enum LammStatus lamm_encode(const struct LammModel *model,
                            const float *vertices,
                            size_t vertices_len,
                            float *z_out,
                            size_t z_len);

// Decode a latent code with control displacements into `3N` coordinates.
// `deltas` lists `[dx, dy, dz]` for every control point in the order of
// [`lamm_model_control_indices`]; null means no displacement.
//
// # Safety
// Pointers must be valid for the given lengths; `deltas` may be null.
enum LammStatus lamm_decode(const struct LammModel *model,
                            const float *z,
                            size_t z_len,
                            const float *deltas,
                            size_t deltas_len,
                            float *out,
                            size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAMM_H */
