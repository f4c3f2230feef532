#ifndef ORCHARDFUSE_H
#define ORCHARDFUSE_H

/* Generated by cbindgen from the orchardfuse-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call in this ABI.
typedef enum OfStatus {
  // The call succeeded.
  OF_STATUS_OK = 0,
  // A pointer, count, or configuration value was unusable.
  OF_STATUS_INVALID_ARGUMENT = 1,
  // Reading or writing a file failed.
  OF_STATUS_IO_ERROR = 2,
  // The computation itself failed (degenerate geometry, divergence).
  OF_STATUS_COMPUTATION_FAILED = 3,
  // Fitness only: no point pair fell within the pairing cutoff.
  OF_STATUS_NO_OVERLAP = 4,
  // An output buffer is smaller than the data it must receive.
  OF_STATUS_BUFFER_TOO_SMALL = 5,
} OfStatus;

// Opaque labeled point cloud handle.
typedef struct OfCloud OfCloud;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, empty if none yet.
// The pointer stays valid until the next failing call on this thread.
const char *of_last_error(void);

// Build a cloud from `count` interleaved xyz points (3*count doubles) and
// optional per-point label codes (0 background, 1 trunk, 2 branch,
// 3 clutter). A null `labels` marks every point as trunk.
//
// # Safety
// `xyz` must point to 3*count readable doubles (unless count is 0),
// `labels` to `count` readable bytes or null, and `out_cloud` to a
// writable pointer slot.
enum OfStatus of_cloud_from_arrays(const double *xyz,
                                   const uint8_t *labels,
                                   uintptr_t count,
                                   struct OfCloud **out_cloud);

// Load a labeled cloud from a PLY file.
//
// # Safety
// `path` must be a readable NUL-terminated string and `out_cloud` a
// writable pointer slot.
enum OfStatus of_cloud_load_ply(const char *path, struct OfCloud **out_cloud);

// Save a cloud as PLY; nonzero `binary` selects binary little-endian,
// zero selects ASCII.
//
// # Safety
// `cloud` must be a live handle and `path` a NUL-terminated string.
enum OfStatus of_cloud_save_ply(const struct OfCloud *cloud, const char *path, int32_t binary);

// Number of points in the cloud; 0 for a null handle.
//
// # Safety
// `cloud` must be a live handle or null.
uintptr_t of_cloud_len(const struct OfCloud *cloud);

// Copy the points into `out_xyz` as interleaved xyz (3 doubles per point).
// `capacity_points` is the number of points the buffer can hold.
//
// # Safety
// `out_xyz` must point to 3*capacity_points writable doubles.
enum OfStatus of_cloud_points(const struct OfCloud *cloud,
                              double *out_xyz,
                              uintptr_t capacity_points);

// Copy the per-point label codes into `out_labels`.
//
// # Safety
// `out_labels` must point to `capacity_points` writable bytes.
enum OfStatus of_cloud_labels(const struct OfCloud *cloud,
                              uint8_t *out_labels,
                              uintptr_t capacity_points);

// Release a cloud handle. Null is a no-op.
//
// # Safety
// `cloud` must be a handle from this library that has not been freed yet,
// or null.
void of_cloud_free(struct OfCloud *cloud);

// Align `source` onto `target`.
//
// `init_transform` (16 row-major doubles or null for identity) seeds the
// solve; `config_json` configures it (null for defaults, same schema as
// the library's registration config, e.g. `{"method":"fast_gicp"}`).
// `out_transform` receives the solved source-to-target motion. The
// optional outputs receive the final fitness (m), accepted iteration
// count, and a 0/1 convergence flag; reaching the iteration cap is
// reported through the flag, not as an error.
//
// # Safety
// Cloud handles must be live; `out_transform` must point to 16 writable
// doubles; optional outputs must be writable or null.
enum OfStatus of_register(const struct OfCloud *source,
                          const struct OfCloud *target,
                          const double *init_transform,
                          const char *config_json,
                          double *out_transform,
                          double *out_fitness_m,
                          uint64_t *out_iterations,
                          int32_t *out_converged);

// Alignment fitness of `transform(source)` against `target`: mean
// nearest-neighbor displacement over the pairs within `max_dist_m`
// (non-positive selects the default cutoff). Returns
// `OF_STATUS_NO_OVERLAP` when nothing pairs; the outputs are written
// only on `OF_STATUS_OK`.
//
// # Safety
// Cloud handles must be live; `transform` must be null or 16 readable
// doubles; optional outputs must be writable or null.
enum OfStatus of_fitness(const struct OfCloud *source,
                         const struct OfCloud *target,
                         const double *transform,
                         double max_dist_m,
                         double *out_fitness_m,
                         double *out_mse_m2,
                         uint64_t *out_pair_count);

// Measure trunk and branch structure of a labeled cloud and return the
// report as a JSON string (released with `of_string_free`). `config_json`
// matches the library's measurement config; null means defaults.
//
// # Safety
// `cloud` must be a live handle; `out_json` must be a writable pointer
// slot; `config_json` must be null or NUL-terminated.
enum OfStatus of_measure_json(const struct OfCloud *cloud,
                              const char *config_json,
                              char **out_json);

// Release a string returned by this library. Null is a no-op.
//
// # Safety
// `s` must have come from this library and not been freed yet, or null.
void of_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORCHARDFUSE_H */
