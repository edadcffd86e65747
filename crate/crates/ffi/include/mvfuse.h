#ifndef MVFUSE_H
#define MVFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum MvfStatus {
  MVF_STATUS_OK = 0,
  MVF_STATUS_NULL_ARGUMENT = 1,
  MVF_STATUS_INVALID_ARGUMENT = 2,
  // Missing, unreadable or malformed file.
  MVF_STATUS_IO = 3,
  // Input data failed validation.
  MVF_STATUS_VALIDATION = 4,
  // NaN or solver failure.
  MVF_STATUS_NUMERICAL = 5,
  // Internal panic; the handle arguments should be considered poisoned.
  MVF_STATUS_PANIC = 6,
} MvfStatus;

typedef struct MvfMapSet MvfMapSet;

typedef struct MvfMesh MvfMesh;

typedef struct MvfPointCloud MvfPointCloud;

// Fusion weights and iteration controls.
typedef struct MvfFusionConfig {
  double w1;
  double w2;
  double w3;
  double w4;
  uint32_t outer_iterations;
  double early_exit;
  // Visibility depth slack; zero or negative means four pixels.
  double occlusion_threshold;
} MvfFusionConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mvf_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *mvf_last_error_message(void);

struct MvfFusionConfig mvf_fusion_config_default(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MvfStatus mvf_mesh_read_obj(const char *path, struct MvfMesh **out);

// Icosphere centered at the origin.
//
// # Safety
// `out` must be a valid pointer.
enum MvfStatus mvf_mesh_icosphere(double radius, uint32_t subdivisions, struct MvfMesh **out);

// # Safety
// `mesh` must come from an `mvf_mesh_*` constructor or be null.
size_t mvf_mesh_vertex_count(const struct MvfMesh *mesh);

// # Safety
// `mesh` must come from an `mvf_mesh_*` constructor or be null.
size_t mvf_mesh_triangle_count(const struct MvfMesh *mesh);

// # Safety
// `mesh` must come from an `mvf_mesh_*` constructor or be null; it is
// invalid afterwards.
void mvf_mesh_free(struct MvfMesh *mesh);

// Renders the 12-view icosahedron rig at `width × height`.
//
// # Safety
// `mesh` must be a live handle and `out` a valid pointer.
enum MvfStatus mvf_render(const struct MvfMesh *mesh,
                          uint32_t width,
                          uint32_t height,
                          struct MvfMapSet **out);

// Per-view bias `U(-bias, bias)` plus Gaussian depth noise.
//
// # Safety
// `maps` must be a live handle and `out` a valid pointer.
enum MvfStatus mvf_perturb(const struct MvfMapSet *maps,
                           double bias,
                           double noise,
                           uint64_t seed,
                           struct MvfMapSet **out);

// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum MvfStatus mvf_mapset_read(const char *dir, struct MvfMapSet **out);

// # Safety
// `maps` must be a live handle and `dir` a NUL-terminated string.
enum MvfStatus mvf_mapset_write(const struct MvfMapSet *maps, const char *dir);

// # Safety
// `maps` must be a live handle or null.
size_t mvf_mapset_view_count(const struct MvfMapSet *maps);

// # Safety
// `maps` must be a live handle or null.
size_t mvf_mapset_foreground_count(const struct MvfMapSet *maps);

// # Safety
// `maps` must be a live handle or null; it is invalid afterwards.
void mvf_mapset_free(struct MvfMapSet *maps);

// Outlier removal then joint depth optimization. `config` may be null for
// defaults. Either output pointer may be null if that result is unwanted.
//
// # Safety
// `maps` must be a live handle; non-null pointers must be valid.
enum MvfStatus mvf_fuse(const struct MvfMapSet *maps,
                        const struct MvfFusionConfig *config,
                        struct MvfMapSet **out_maps,
                        struct MvfPointCloud **out_cloud);

// Concatenated per-view points of a map set, without optimization.
//
// # Safety
// `maps` must be a live handle and `out` a valid pointer.
enum MvfStatus mvf_generate_points(const struct MvfMapSet *maps, struct MvfPointCloud **out);

// # Safety
// `cloud` must be a live handle or null.
size_t mvf_cloud_len(const struct MvfPointCloud *cloud);

// Copies `xyz` triples of points and, if `normals` is non-null, of normals.
// Both buffers must hold `3 * capacity` doubles; fails if the cloud has
// more than `capacity` points.
//
// # Safety
// Buffers must be valid for `3 * capacity` writes.
enum MvfStatus mvf_cloud_copy(const struct MvfPointCloud *cloud,
                              double *points,
                              double *normals,
                              size_t capacity);

// # Safety
// `cloud` must be a live handle and `path` a NUL-terminated string.
enum MvfStatus mvf_cloud_write_ply(const struct MvfPointCloud *cloud, const char *path);

// # Safety
// `cloud` must be a live handle or null; it is invalid afterwards.
void mvf_cloud_free(struct MvfPointCloud *cloud);

// Mean distance from the cloud's points to the mesh surface.
//
// # Safety
// Handles must be live and `out` valid.
enum MvfStatus mvf_mean_surface_distance(const struct MvfPointCloud *cloud,
                                         const struct MvfMesh *mesh,
                                         double *out);

// Symmetric Chamfer distance between a cloud and a mesh sampled with
// `samples` points.
//
// # Safety
// Handles must be live and `out` valid.
enum MvfStatus mvf_chamfer(const struct MvfPointCloud *cloud,
                           const struct MvfMesh *mesh,
                           size_t samples,
                           uint64_t seed,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVFUSE_H */
